//! Time axis: uniform step grids, partitions for feedback sampling, and
//! piecewise-constant control signals.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimeError {
    #[error("time grid needs t0 < t_end and at least one step (got t0={t0}, t_end={t_end}, steps={steps})")]
    InvalidGrid { t0: f64, t_end: f64, steps: usize },
    #[error("partition nodes must strictly increase from t0 to t_end")]
    InvalidPartition,
    #[error("control signal needs one value row per partition interval (got {rows} rows for {intervals} intervals)")]
    ValueCountMismatch { rows: usize, intervals: usize },
    #[error("control value rows must share one dimension")]
    RaggedValues,
    #[error("time {t} lies outside the horizon [{t0}, {t_end}]")]
    OutOfHorizon { t: f64, t0: f64, t_end: f64 },
}

/// Uniform grid of `n_steps + 1` nodes on `[t0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self, TimeError> {
        if !(t0.is_finite() && t_end.is_finite()) || t0 >= t_end || n_steps == 0 {
            return Err(TimeError::InvalidGrid { t0, t_end, steps: n_steps });
        }
        Ok(Self { t0, t_end, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn tau(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    /// Node `k`, exact at both endpoints.
    pub fn node(&self, k: usize) -> f64 {
        if k == 0 {
            self.t0
        } else if k >= self.n_steps {
            self.t_end
        } else {
            self.t0 + (self.t_end - self.t0) * (k as f64 / self.n_steps as f64)
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.node(k))
    }

    pub fn contains(&self, t: f64) -> bool {
        let slack = 1e-12 * (self.t_end - self.t0).abs();
        t >= self.t0 - slack && t <= self.t_end + slack
    }
}

/// Strictly increasing nodes `t0 = s_0 < s_1 < … < s_K = t_end` splitting the
/// horizon into sampling intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    nodes: Vec<f64>,
}

impl Partition {
    pub fn new(nodes: Vec<f64>) -> Result<Self, TimeError> {
        if nodes.len() < 2 || nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(TimeError::InvalidPartition);
        }
        Ok(Self { nodes })
    }

    /// Uniform partition of `[t0, t_end]` into `k` intervals.  When a grid is
    /// given the nodes snap to grid nodes so every sampling interval covers a
    /// whole number of solver steps.
    pub fn uniform(t0: f64, t_end: f64, k: usize) -> Result<Self, TimeError> {
        if k == 0 || !(t0 < t_end) {
            return Err(TimeError::InvalidPartition);
        }
        let nodes = (0..=k)
            .map(|i| {
                if i == k {
                    t_end
                } else {
                    t0 + (t_end - t0) * (i as f64 / k as f64)
                }
            })
            .collect();
        Self::new(nodes)
    }

    pub fn uniform_on(tg: &TimeGrid, k: usize) -> Result<Self, TimeError> {
        let k = k.min(tg.n_steps()).max(1);
        let mut idx: Vec<usize> = (0..=k)
            .map(|i| ((i as f64 / k as f64) * tg.n_steps() as f64).round() as usize)
            .collect();
        idx.dedup();
        Self::new(idx.into_iter().map(|i| tg.node(i)).collect())
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn n_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.nodes[i], self.nodes[i + 1])
    }

    pub fn t0(&self) -> f64 {
        self.nodes[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Largest interval length.
    pub fn diam(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Index of the interval containing `t` (half-open `[s_i, s_{i+1})`, with
    /// the final interval closed at `t_end`).  A small relative slack guards
    /// against node values reconstructed through arithmetic.
    pub fn interval_index(&self, t: f64) -> usize {
        let span = self.t_end() - self.t0();
        let eps = 1e-12 * span;
        if t >= self.t_end() - eps {
            return self.n_intervals() - 1;
        }
        let mut lo = 0usize;
        let mut hi = self.n_intervals() - 1;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if self.nodes[mid] <= t + eps {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Halve the diameter by inserting interval midpoints.  With a grid the
    /// midpoints snap to grid nodes; intervals of a single solver step are
    /// left alone.
    pub fn halved(&self, tg: Option<&TimeGrid>) -> Partition {
        let mut out = Vec::with_capacity(self.nodes.len() * 2);
        for w in self.nodes.windows(2) {
            out.push(w[0]);
            let mid = match tg {
                None => 0.5 * (w[0] + w[1]),
                Some(g) => {
                    let k0 = ((w[0] - g.t0()) / g.tau()).round() as usize;
                    let k1 = ((w[1] - g.t0()) / g.tau()).round() as usize;
                    if k1 <= k0 + 1 {
                        continue;
                    }
                    g.node((k0 + k1) / 2)
                }
            };
            if mid > w[0] && mid < w[1] {
                out.push(mid);
            }
        }
        out.push(self.t_end());
        Partition { nodes: out }
    }
}

/// Piecewise-constant control `u: [t0, t_end] → R^m` over a [`Partition`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    partition: Partition,
    values: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn new(partition: Partition, values: Vec<Vec<f64>>) -> Result<Self, TimeError> {
        if values.len() != partition.n_intervals() {
            return Err(TimeError::ValueCountMismatch {
                rows: values.len(),
                intervals: partition.n_intervals(),
            });
        }
        let dim = values.first().map_or(0, Vec::len);
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(TimeError::RaggedValues);
        }
        Ok(Self { partition, values })
    }

    /// Constant control on a single interval `[t0, t_end]`.
    pub fn constant(t0: f64, t_end: f64, value: Vec<f64>) -> Result<Self, TimeError> {
        Self::new(Partition::new(vec![t0, t_end])?, vec![value])
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn t0(&self) -> f64 {
        self.partition.t0()
    }

    pub fn t_end(&self) -> f64 {
        self.partition.t_end()
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        &self.values[self.partition.interval_index(t)]
    }

    /// Break points of the signal (partition nodes).
    pub fn break_points(&self) -> &[f64] {
        self.partition.nodes()
    }

    /// Restate the same control on a finer partition whose nodes include the
    /// current break points.
    pub fn resampled(&self, partition: Partition) -> Result<Self, TimeError> {
        let values = (0..partition.n_intervals())
            .map(|i| {
                let (a, b) = partition.interval(i);
                self.value_at(0.5 * (a + b)).to_vec()
            })
            .collect();
        Self::new(partition, values)
    }

    /// Componentwise convex blend `α·self + (1−α)·other`, assuming matching
    /// horizons; `other` is evaluated at interval midpoints of the union
    /// partition so both break-point sets survive.
    pub fn blended_with(&self, other: &ControlSignal, alpha: f64) -> Result<Self, TimeError> {
        let mut nodes: Vec<f64> = self
            .break_points()
            .iter()
            .chain(other.break_points())
            .copied()
            .collect();
        nodes.sort_by(f64::total_cmp);
        nodes.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (self.t_end() - self.t0()));
        let partition = Partition::new(nodes)?;
        let values = (0..partition.n_intervals())
            .map(|i| {
                let (a, b) = partition.interval(i);
                let t = 0.5 * (a + b);
                self.value_at(t)
                    .iter()
                    .zip(other.value_at(t))
                    .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                    .collect()
            })
            .collect();
        Self::new(partition, values)
    }
}
