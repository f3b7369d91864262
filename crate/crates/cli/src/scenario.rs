//! Scenario files: a line-oriented `key = value` format with `[section]`
//! headers that declares everything a run needs (populations, control
//! family, discretization, algorithm parameters).  Three scenarios ship as
//! built-ins under the names `example1`, `crossring`, and `mnist36`.

use std::path::{Path, PathBuf};

use measure_steer_core::fields::{parse_field, validate_h1, FieldError, ScalarField, VectorField};
use measure_steer_core::fmp::SamplingScheme;
use measure_steer_core::measures::GridSpec;
use measure_steer_core::time::TimeGrid;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// The scenario text could not be read as `key = value` lines.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    /// The text parsed but declares an inconsistent or incomplete run.
    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn validation(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation { field: field.to_string(), reason: reason.into() }
}

fn parse_err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse { line, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Grid,
    Particles,
}

impl Backend {
    pub fn parse(word: &str) -> Option<Self> {
        match word {
            "grid" => Some(Backend::Grid),
            "particles" => Some(Backend::Particles),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backend::Grid => "grid",
            Backend::Particles => "particles",
        }
    }
}

/// Where a population's initial measure comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    /// A Dirac mass (particles) or its bilinear cell deposit (grid).
    Point(Vec<f64>),
    /// Isotropic Gaussian density with the given standard deviation.
    Gaussian { center: [f64; 2], sigma: f64 },
    /// Cross-shaped indicator `{|a−c₁| ≤ w or |b−c₂| ≤ w}` clipped to the
    /// box `|x−c|∞ ≤ arm`, smoothed and blurred.
    Cross { center: [f64; 2], arm: f64, width: f64 },
    /// Annulus indicator `r0 ≤ |x−c| ≤ r1`, smoothed and blurred.
    Ring { center: [f64; 2], r0: f64, r1: f64 },
    /// Grid density dump (`a,b,value` CSV) re-read onto the scenario grid.
    Density(PathBuf),
    /// Empirical atom file (`x1,..,xn,weight` CSV).
    Atoms(PathBuf),
    /// Grayscale image (PGM or IDX) turned into atoms on the unit square.
    Image { path: PathBuf, index: usize, threshold: f64 },
}

/// Terminal cost: either a scalar DSL expression or `|x − target|²`.
#[derive(Debug, Clone, PartialEq)]
pub enum CostSpec {
    Expr(String),
    Target(Vec<f64>),
}

impl CostSpec {
    pub fn build(&self) -> Result<ScalarField, FieldError> {
        match self {
            CostSpec::Expr(src) => ScalarField::parse(src),
            CostSpec::Target(t) => Ok(ScalarField::squared_distance(t.clone())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PopulationSpec {
    pub source: SourceSpec,
    pub cost: CostSpec,
    /// Optional autonomous drift, as a vector DSL expression.
    pub drift: Option<String>,
    /// Gaussian blur radius for the cross and ring shapes (default `2h`).
    pub blur: Option<f64>,
    /// Atom count when a density has to be sampled for the particle
    /// backend.
    pub atoms: usize,
}

#[derive(Debug, Clone)]
pub struct ControlSpec {
    /// One vector DSL expression per control component.
    pub basis: Vec<String>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Constant initial guess for the reference control.
    pub guess: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AlgorithmSpec {
    pub eps1_rel: f64,
    /// Partition diameter floor; `None` means two solver steps.
    pub eps2: Option<f64>,
    pub alphas: Vec<f64>,
    pub explores: Vec<Option<f64>>,
    pub max_outer: usize,
    /// Number of uniform intervals in the initial sampling partition.
    pub partition: usize,
    pub scheme: SamplingScheme,
}

impl AlgorithmSpec {
    fn defaults() -> Self {
        Self {
            eps1_rel: 1e-8,
            eps2: None,
            alphas: vec![0.0, 0.75, 0.5, 0.25],
            explores: vec![Some(1.0), Some(-1.0)],
            max_outer: 100,
            partition: 1,
            scheme: SamplingScheme::Hold,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub backend: Backend,
    pub seed: u64,
    pub time: TimeGrid,
    pub grid: Option<GridSpec>,
    pub control: ControlSpec,
    pub algorithm: AlgorithmSpec,
    /// Number of snapshot frames the simulate command writes.
    pub frames: usize,
    pub populations: Vec<PopulationSpec>,
    /// Non-fatal validation notes (currently the CFL pre-estimate).
    pub warnings: Vec<String>,
    /// Verbatim scenario text, hashed into the run manifest.
    pub source_text: String,
    /// Directory that relative file references resolve against.
    pub base_dir: PathBuf,
}

pub const BUILTIN_NAMES: [&str; 3] = ["example1", "crossring", "mnist36"];

/// Single shared control moving a point mass in the plane: the control
/// multiplies the field (1, −a), the terminal cost is the second
/// coordinate, and the constant guess 0 is already bang-bang extremal.
const EXAMPLE1: &str = "\
name = example1
backend = particles
seed = 0

[time]
t_end = 1.0
steps = 100

[grid]
min = -3.0, -3.0
max = 3.0, 3.0
cells = 120, 120

[control]
basis = \"(1, -a)\"
lo = -1.0
hi = 1.0
guess = 0.0

[population]
initial = point 0.0 0.0
cost = \"b\"
";

/// Two overlapping shapes steered to opposite corners by one shared
/// three-component control over the field family (0,1), (a+b,a),
/// (sin a, a−b).
const CROSSRING: &str = "\
name = crossring
backend = grid
seed = 0

[time]
t_end = 2.0
steps = 500

[grid]
min = -5.0, -5.0
max = 5.0, 5.0
cells = 100, 100

[control]
basis = \"(0, 1)\", \"(a + b, a)\", \"(sin(a), a - b)\"
lo = -1.0
hi = 1.0
guess = 1.0, 0.0, 0.0

[algorithm]
alphas = 0.75
explores = 1.0, -1.0
max_outer = 30
partition = 20

[population]
initial = cross 0.5 0.5 1.0 0.25
cost = target 1.0 1.0

[population]
initial = ring -0.5 -0.5 0.55 0.95
cost = target -1.0 -1.0
";

/// Two raster digits on the unit square driven apart along the first
/// coordinate by the same field family as the cross/ring scenario.  The
/// IDX file is user-supplied: image index 0 steers toward (3,0), index 1
/// toward (−3,0).
const MNIST36: &str = "\
name = mnist36
backend = particles
seed = 0

[time]
t_end = 1.0
steps = 100

[control]
basis = \"(0, 1)\", \"(a + b, a)\", \"(sin(a), a - b)\"
lo = -1.0
hi = 1.0
guess = 0.0, 0.0, 0.0

[algorithm]
partition = 10
max_outer = 10

[population]
initial = image digits.idx 0 0.25
cost = target 3.0 0.0

[population]
initial = image digits.idx 1 0.25
cost = target -3.0 0.0
";

pub fn builtin_text(name: &str) -> Option<&'static str> {
    match name {
        "example1" => Some(EXAMPLE1),
        "crossring" => Some(CROSSRING),
        "mnist36" => Some(MNIST36),
        _ => None,
    }
}

struct RawEntry {
    key: String,
    value: String,
    line: usize,
}

struct RawSection {
    name: String,
    line: usize,
    entries: Vec<RawEntry>,
}

/// Cut an end-of-line comment: everything from the first `#` that is not
/// inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (idx, ch) in line.char_indices() {
        match ch {
            '"' => in_quote = !in_quote,
            '#' if !in_quote => return &line[..idx],
            _ => {}
        }
    }
    line
}

/// Split on commas that are not inside double quotes, trimming each piece.
fn split_items(value: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut cur = String::new();
    let mut in_quote = false;
    for ch in value.chars() {
        match ch {
            '"' => {
                in_quote = !in_quote;
                cur.push(ch);
            }
            ',' if !in_quote => {
                items.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(ch),
        }
    }
    items.push(cur.trim().to_string());
    items
}

fn lex_sections(text: &str) -> Result<Vec<RawSection>, ScenarioError> {
    let mut sections = vec![RawSection { name: String::new(), line: 0, entries: Vec::new() }];
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw_line).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line_no, "unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(parse_err(line_no, "empty section name"));
            }
            sections.push(RawSection {
                name: name.to_string(),
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(parse_err(line_no, "empty key before `=`"));
        }
        sections.last_mut().unwrap().entries.push(RawEntry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line: line_no,
        });
    }
    Ok(sections)
}

/// Typed access to one section's entries with duplicate/unknown-key checks.
struct SectionReader<'a> {
    section: &'a RawSection,
    label: String,
}

impl<'a> SectionReader<'a> {
    fn new(section: &'a RawSection, label: impl Into<String>) -> Self {
        Self { section, label: label.into() }
    }

    fn entry(&self, key: &str) -> Result<Option<&'a RawEntry>, ScenarioError> {
        let mut found = None;
        for e in &self.section.entries {
            if e.key == key {
                if found.is_some() {
                    return Err(parse_err(e.line, format!("duplicate key `{key}`")));
                }
                found = Some(e);
            }
        }
        Ok(found)
    }

    fn check_known(&self, known: &[&str]) -> Result<(), ScenarioError> {
        for e in &self.section.entries {
            if !known.contains(&e.key.as_str()) {
                return Err(parse_err(
                    e.line,
                    format!("unknown key `{}` in {}", e.key, self.label),
                ));
            }
        }
        Ok(())
    }

    fn f64_at(&self, key: &str) -> Result<Option<f64>, ScenarioError> {
        match self.entry(key)? {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<f64>()
                .map(Some)
                .map_err(|_| parse_err(e.line, format!("`{key}` is not a number: `{}`", e.value))),
        }
    }

    fn usize_at(&self, key: &str) -> Result<Option<usize>, ScenarioError> {
        match self.entry(key)? {
            None => Ok(None),
            Some(e) => e.value.parse::<usize>().map(Some).map_err(|_| {
                parse_err(e.line, format!("`{key}` is not a nonnegative integer: `{}`", e.value))
            }),
        }
    }

    fn u64_at(&self, key: &str) -> Result<Option<u64>, ScenarioError> {
        match self.entry(key)? {
            None => Ok(None),
            Some(e) => e.value.parse::<u64>().map(Some).map_err(|_| {
                parse_err(e.line, format!("`{key}` is not an unsigned integer: `{}`", e.value))
            }),
        }
    }

    fn word_at(&self, key: &str) -> Result<Option<(&'a str, usize)>, ScenarioError> {
        Ok(self.entry(key)?.map(|e| (e.value.as_str(), e.line)))
    }

    fn f64_list_at(&self, key: &str) -> Result<Option<Vec<f64>>, ScenarioError> {
        match self.entry(key)? {
            None => Ok(None),
            Some(e) => {
                let mut out = Vec::new();
                for item in split_items(&e.value) {
                    out.push(item.parse::<f64>().map_err(|_| {
                        parse_err(e.line, format!("`{key}` list item is not a number: `{item}`"))
                    })?);
                }
                Ok(Some(out))
            }
        }
    }

    /// A comma-separated list of double-quoted strings.
    fn string_list_at(&self, key: &str) -> Result<Option<Vec<String>>, ScenarioError> {
        match self.entry(key)? {
            None => Ok(None),
            Some(e) => {
                let mut out = Vec::new();
                for item in split_items(&e.value) {
                    out.push(unquote(&item).ok_or_else(|| {
                        parse_err(e.line, format!("`{key}` items must be double-quoted: `{item}`"))
                    })?);
                }
                Ok(Some(out))
            }
        }
    }
}

fn unquote(item: &str) -> Option<String> {
    let inner = item.strip_prefix('"')?.strip_suffix('"')?;
    if inner.contains('"') {
        return None;
    }
    Some(inner.to_string())
}

fn parse_source(value: &str, line: usize) -> Result<SourceSpec, ScenarioError> {
    let words: Vec<&str> = value.split_whitespace().collect();
    let num = |w: &str, what: &str| -> Result<f64, ScenarioError> {
        w.parse::<f64>()
            .map_err(|_| parse_err(line, format!("{what} is not a number: `{w}`")))
    };
    match words.as_slice() {
        ["point", rest @ ..] if !rest.is_empty() => {
            let mut coords = Vec::with_capacity(rest.len());
            for w in rest {
                coords.push(num(w, "point coordinate")?);
            }
            Ok(SourceSpec::Point(coords))
        }
        ["gaussian", a, b, sigma] => Ok(SourceSpec::Gaussian {
            center: [num(a, "gaussian center")?, num(b, "gaussian center")?],
            sigma: num(sigma, "gaussian sigma")?,
        }),
        ["cross", a, b, arm, width] => Ok(SourceSpec::Cross {
            center: [num(a, "cross center")?, num(b, "cross center")?],
            arm: num(arm, "cross arm")?,
            width: num(width, "cross width")?,
        }),
        ["ring", a, b, r0, r1] => Ok(SourceSpec::Ring {
            center: [num(a, "ring center")?, num(b, "ring center")?],
            r0: num(r0, "ring inner radius")?,
            r1: num(r1, "ring outer radius")?,
        }),
        ["density", path] => Ok(SourceSpec::Density(PathBuf::from(path))),
        ["atoms", path] => Ok(SourceSpec::Atoms(PathBuf::from(path))),
        ["image", path, rest @ ..] if rest.len() <= 2 => {
            let index = match rest.first() {
                None => 0,
                Some(w) => w.parse::<usize>().map_err(|_| {
                    parse_err(line, format!("image index is not an integer: `{w}`"))
                })?,
            };
            let threshold = match rest.get(1) {
                None => 0.25,
                Some(w) => num(w, "image threshold")?,
            };
            Ok(SourceSpec::Image { path: PathBuf::from(path), index, threshold })
        }
        _ => Err(parse_err(
            line,
            format!(
                "unrecognized measure source `{value}` (expected point | gaussian | cross | \
                 ring | density | atoms | image)"
            ),
        )),
    }
}

fn parse_cost(value: &str, line: usize) -> Result<CostSpec, ScenarioError> {
    if value.starts_with('"') {
        let src = unquote(value)
            .ok_or_else(|| parse_err(line, format!("malformed quoted expression: `{value}`")))?;
        return Ok(CostSpec::Expr(src));
    }
    let words: Vec<&str> = value.split_whitespace().collect();
    match words.split_first() {
        Some((&"target", rest)) if !rest.is_empty() => {
            let mut t = Vec::with_capacity(rest.len());
            for w in rest {
                t.push(w.parse::<f64>().map_err(|_| {
                    parse_err(line, format!("target coordinate is not a number: `{w}`"))
                })?);
            }
            Ok(CostSpec::Target(t))
        }
        _ => Err(parse_err(
            line,
            format!("cost must be a quoted expression or `target <coords>`, got `{value}`"),
        )),
    }
}

fn broadcast(values: Vec<f64>, m: usize, field: &str) -> Result<Vec<f64>, ScenarioError> {
    if values.len() == m {
        Ok(values)
    } else if values.len() == 1 {
        Ok(vec![values[0]; m])
    } else {
        Err(validation(
            field,
            format!("expected 1 or {m} values, got {}", values.len()),
        ))
    }
}

impl Scenario {
    /// Resolve `arg` as a scenario file path, falling back to a built-in
    /// name, then parse and validate it.
    pub fn load(arg: &str) -> Result<Self, ScenarioError> {
        let path = Path::new(arg);
        if path.is_file() {
            let text = std::fs::read_to_string(path)
                .map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            return Self::parse(&text, base);
        }
        match builtin_text(arg) {
            Some(text) => Self::parse(text, PathBuf::from(".")),
            None => Err(validation(
                "scenario",
                format!(
                    "`{arg}` is neither a readable file nor a built-in name \
                     (available: {})",
                    BUILTIN_NAMES.join(", ")
                ),
            )),
        }
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self, ScenarioError> {
        let sections = lex_sections(text)?;
        let mut root = None;
        let mut time = None;
        let mut grid_sec = None;
        let mut control = None;
        let mut algorithm = None;
        let mut output = None;
        let mut populations = Vec::new();
        for section in &sections {
            let slot = match section.name.as_str() {
                "" => &mut root,
                "time" => &mut time,
                "grid" => &mut grid_sec,
                "control" => &mut control,
                "algorithm" => &mut algorithm,
                "output" => &mut output,
                "population" => {
                    populations.push(section);
                    continue;
                }
                other => {
                    return Err(parse_err(section.line, format!("unknown section `[{other}]`")))
                }
            };
            if slot.is_some() {
                return Err(parse_err(section.line, format!("duplicate section `[{}]`", section.name)));
            }
            *slot = Some(section);
        }

        let root = SectionReader::new(root.expect("root section always present"), "the header");
        root.check_known(&["name", "backend", "seed"])?;
        let name = root
            .word_at("name")?
            .map(|(w, _)| w.to_string())
            .unwrap_or_else(|| "unnamed".to_string());
        let (backend_word, backend_line) =
            root.word_at("backend")?.ok_or_else(|| validation("backend", "missing (grid | particles)"))?;
        let backend = Backend::parse(backend_word).ok_or_else(|| {
            parse_err(backend_line, format!("backend must be grid or particles, got `{backend_word}`"))
        })?;
        let seed = root.u64_at("seed")?.unwrap_or(0);

        let time_sec = time.ok_or_else(|| validation("[time]", "section missing"))?;
        let tr = SectionReader::new(time_sec, "[time]");
        tr.check_known(&["t0", "t_end", "steps"])?;
        let t0 = tr.f64_at("t0")?.unwrap_or(0.0);
        let t_end = tr.f64_at("t_end")?.ok_or_else(|| validation("time.t_end", "missing"))?;
        let steps = tr.usize_at("steps")?.ok_or_else(|| validation("time.steps", "missing"))?;
        let time = TimeGrid::new(t0, t_end, steps)
            .map_err(|e| validation("time", e.to_string()))?;

        let grid = match grid_sec {
            None => None,
            Some(sec) => {
                let gr = SectionReader::new(sec, "[grid]");
                gr.check_known(&["min", "max", "cells"])?;
                let min = gr.f64_list_at("min")?.ok_or_else(|| validation("grid.min", "missing"))?;
                let max = gr.f64_list_at("max")?.ok_or_else(|| validation("grid.max", "missing"))?;
                let cells = gr
                    .entry("cells")?
                    .ok_or_else(|| validation("grid.cells", "missing"))?;
                let cell_list: Vec<usize> = split_items(&cells.value)
                    .iter()
                    .map(|w| {
                        w.parse::<usize>().map_err(|_| {
                            parse_err(cells.line, format!("cell count is not an integer: `{w}`"))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if min.len() != 2 || max.len() != 2 || cell_list.len() != 2 {
                    return Err(validation("grid", "min, max, and cells must have 2 entries"));
                }
                if cell_list[0] < 3 || cell_list[1] < 3 {
                    return Err(validation("grid.cells", "need at least 3 cells per axis"));
                }
                Some(
                    GridSpec::new([min[0], min[1]], [max[0], max[1]], [cell_list[0], cell_list[1]])
                        .map_err(|e| validation("grid", e.to_string()))?,
                )
            }
        };

        let control_sec = control.ok_or_else(|| validation("[control]", "section missing"))?;
        let cr = SectionReader::new(control_sec, "[control]");
        cr.check_known(&["basis", "lo", "hi", "guess"])?;
        let basis = cr
            .string_list_at("basis")?
            .ok_or_else(|| validation("control.basis", "missing"))?;
        if basis.is_empty() {
            return Err(validation("control.basis", "need at least one basis field"));
        }
        let m = basis.len();
        let lo = broadcast(
            cr.f64_list_at("lo")?.ok_or_else(|| validation("control.lo", "missing"))?,
            m,
            "control.lo",
        )?;
        let hi = broadcast(
            cr.f64_list_at("hi")?.ok_or_else(|| validation("control.hi", "missing"))?,
            m,
            "control.hi",
        )?;
        for k in 0..m {
            if !(lo[k] < hi[k]) {
                return Err(validation(
                    "control",
                    format!("component {}: lo = {} must be below hi = {}", k + 1, lo[k], hi[k]),
                ));
            }
        }
        let guess = broadcast(
            cr.f64_list_at("guess")?.unwrap_or_else(|| vec![0.0]),
            m,
            "control.guess",
        )?;
        for k in 0..m {
            if guess[k] < lo[k] - 1e-12 || guess[k] > hi[k] + 1e-12 {
                return Err(validation(
                    "control.guess",
                    format!("component {} value {} is outside [{}, {}]", k + 1, guess[k], lo[k], hi[k]),
                ));
            }
        }
        let control = ControlSpec { basis, lo, hi, guess };

        let mut algo = AlgorithmSpec::defaults();
        if let Some(sec) = algorithm {
            let ar = SectionReader::new(sec, "[algorithm]");
            ar.check_known(&[
                "eps1_rel", "eps2", "alphas", "explores", "max_outer", "partition", "scheme",
            ])?;
            if let Some(v) = ar.f64_at("eps1_rel")? {
                algo.eps1_rel = v;
            }
            if let Some(v) = ar.f64_at("eps2")? {
                algo.eps2 = Some(v);
            }
            if let Some(v) = ar.f64_list_at("alphas")? {
                algo.alphas = v;
            }
            if let Some(e) = ar.entry("explores")? {
                let mut explores = Vec::new();
                for item in split_items(&e.value) {
                    if item == "none" {
                        explores.push(None);
                    } else {
                        explores.push(Some(item.parse::<f64>().map_err(|_| {
                            parse_err(
                                e.line,
                                format!("explore entries are numbers or `none`, got `{item}`"),
                            )
                        })?));
                    }
                }
                algo.explores = explores;
            }
            if let Some(v) = ar.usize_at("max_outer")? {
                algo.max_outer = v;
            }
            if let Some(v) = ar.usize_at("partition")? {
                algo.partition = v;
            }
            if let Some((w, line)) = ar.word_at("scheme")? {
                algo.scheme = match w {
                    "hold" => SamplingScheme::Hold,
                    "reselect" => SamplingScheme::Reselect,
                    other => {
                        return Err(parse_err(
                            line,
                            format!("scheme must be hold or reselect, got `{other}`"),
                        ))
                    }
                };
            }
        }
        for &a in &algo.alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(validation("algorithm.alphas", format!("alpha {a} outside [0, 1]")));
            }
        }
        if algo.alphas.is_empty() || algo.explores.is_empty() {
            return Err(validation("algorithm", "alphas and explores must be non-empty"));
        }
        if algo.partition == 0 {
            return Err(validation("algorithm.partition", "need at least one interval"));
        }
        if let Some(e2) = algo.eps2 {
            if e2 <= 0.0 {
                return Err(validation("algorithm.eps2", "must be positive"));
            }
        }
        if algo.eps1_rel <= 0.0 {
            return Err(validation("algorithm.eps1_rel", "must be positive"));
        }

        let mut frames = 11usize;
        if let Some(sec) = output {
            let or = SectionReader::new(sec, "[output]");
            or.check_known(&["frames"])?;
            if let Some(v) = or.usize_at("frames")? {
                if v < 2 {
                    return Err(validation("output.frames", "need at least 2 frames"));
                }
                frames = v;
            }
        }

        if populations.is_empty() || populations.len() > 2 {
            return Err(validation(
                "[population]",
                format!("need 1 or 2 population sections, got {}", populations.len()),
            ));
        }
        let mut pops = Vec::with_capacity(populations.len());
        for sec in &populations {
            let pr = SectionReader::new(sec, "[population]");
            pr.check_known(&["initial", "cost", "drift", "blur", "atoms"])?;
            let init = pr
                .entry("initial")?
                .ok_or_else(|| validation("population.initial", "missing"))?;
            let source = parse_source(&init.value, init.line)?;
            let cost_entry =
                pr.entry("cost")?.ok_or_else(|| validation("population.cost", "missing"))?;
            let cost = parse_cost(&cost_entry.value, cost_entry.line)?;
            let drift = match pr.entry("drift")? {
                None => None,
                Some(e) => Some(unquote(&e.value).ok_or_else(|| {
                    parse_err(e.line, format!("drift must be a quoted expression: `{}`", e.value))
                })?),
            };
            let blur = pr.f64_at("blur")?;
            let atoms = pr.usize_at("atoms")?.unwrap_or(2000);
            if atoms == 0 {
                return Err(validation("population.atoms", "need at least one atom"));
            }
            pops.push(PopulationSpec { source, cost, drift, blur, atoms });
        }

        let mut scenario = Scenario {
            name,
            backend,
            seed,
            time,
            grid,
            control,
            algorithm: algo,
            frames,
            populations: pops,
            warnings: Vec::new(),
            source_text: text.to_string(),
            base_dir,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Spatial dimension of the run, fixed by the control basis fields.
    pub fn dim(&self) -> Result<usize, ScenarioError> {
        let field = parse_field(&self.control.basis[0])
            .map_err(|e| validation("control.basis", e.to_string()))?;
        Ok(field.dim())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn validate(&mut self) -> Result<(), ScenarioError> {
        let mut basis_fields = Vec::with_capacity(self.control.basis.len());
        for (k, src) in self.control.basis.iter().enumerate() {
            let field = parse_field(src).map_err(|e| {
                validation(&format!("control.basis[{}]", k + 1), e.to_string())
            })?;
            basis_fields.push(field);
        }
        let dim = basis_fields[0].dim();
        for (k, f) in basis_fields.iter().enumerate() {
            if f.dim() != dim {
                return Err(validation(
                    &format!("control.basis[{}]", k + 1),
                    format!("dimension {} clashes with component 1's dimension {dim}", f.dim()),
                ));
            }
        }
        if self.backend == Backend::Grid {
            if self.grid.is_none() {
                return Err(validation("[grid]", "required by the grid backend"));
            }
            if dim != 2 {
                return Err(validation(
                    "control.basis",
                    format!("the grid backend is planar but the basis fields have dimension {dim}"),
                ));
            }
        }

        let mut drift_fields: Vec<Option<VectorField>> = Vec::new();
        for (i, pop) in self.populations.iter().enumerate() {
            let label = format!("population {} ", i + 1);
            match &pop.cost {
                CostSpec::Expr(src) => {
                    ScalarField::parse(src)
                        .map_err(|e| validation(&format!("{label}cost"), e.to_string()))?;
                }
                CostSpec::Target(t) => {
                    if t.len() != dim {
                        return Err(validation(
                            &format!("{label}cost"),
                            format!("target has {} coordinates, dynamics have {dim}", t.len()),
                        ));
                    }
                }
            }
            let drift = match &pop.drift {
                None => None,
                Some(src) => {
                    let f = parse_field(src)
                        .map_err(|e| validation(&format!("{label}drift"), e.to_string()))?;
                    if f.dim() != dim {
                        return Err(validation(
                            &format!("{label}drift"),
                            format!("dimension {} clashes with the basis dimension {dim}", f.dim()),
                        ));
                    }
                    Some(f)
                }
            };
            drift_fields.push(drift);

            match &pop.source {
                SourceSpec::Point(coords) => {
                    if coords.len() != dim {
                        return Err(validation(
                            &format!("{label}initial"),
                            format!("point has {} coordinates, dynamics have {dim}", coords.len()),
                        ));
                    }
                }
                SourceSpec::Gaussian { sigma, .. } => {
                    if dim != 2 {
                        return Err(validation(
                            &format!("{label}initial"),
                            "gaussian sources are planar".to_string(),
                        ));
                    }
                    if *sigma <= 0.0 {
                        return Err(validation(&format!("{label}initial"), "sigma must be positive"));
                    }
                }
                SourceSpec::Cross { arm, width, .. } => {
                    self.require_grid(&label)?;
                    if *arm <= 0.0 || *width <= 0.0 || width > arm {
                        return Err(validation(
                            &format!("{label}initial"),
                            "need 0 < width ≤ arm".to_string(),
                        ));
                    }
                }
                SourceSpec::Ring { r0, r1, .. } => {
                    self.require_grid(&label)?;
                    if !(0.0 <= *r0 && r0 < r1) {
                        return Err(validation(
                            &format!("{label}initial"),
                            "need 0 ≤ r0 < r1".to_string(),
                        ));
                    }
                }
                SourceSpec::Density(path) => {
                    self.require_grid(&label)?;
                    self.require_file(&label, path)?;
                }
                SourceSpec::Atoms(path) => {
                    self.require_file(&label, path)?;
                }
                SourceSpec::Image { path, threshold, .. } => {
                    if dim != 2 {
                        return Err(validation(
                            &format!("{label}initial"),
                            "image sources are planar".to_string(),
                        ));
                    }
                    self.require_file(&label, path)?;
                    if !(0.0..1.0).contains(threshold) {
                        return Err(validation(
                            &format!("{label}initial"),
                            "image threshold must be in [0, 1)".to_string(),
                        ));
                    }
                }
            }
            if let Some(blur) = pop.blur {
                if blur < 0.0 {
                    return Err(validation(&format!("{label}blur"), "must be nonnegative"));
                }
            }
        }

        if let Some(spec) = &self.grid {
            self.warnings = cfl_warnings(
                spec,
                &basis_fields,
                &drift_fields,
                &self.control.lo,
                &self.control.hi,
                self.time.tau(),
            );
        }
        Ok(())
    }

    fn require_grid(&self, label: &str) -> Result<(), ScenarioError> {
        if self.grid.is_none() {
            return Err(validation(
                &format!("{label}initial"),
                "this source is rasterized and needs a [grid] section".to_string(),
            ));
        }
        Ok(())
    }

    fn require_file(&self, label: &str, path: &Path) -> Result<(), ScenarioError> {
        let full = self.resolve(path);
        if !full.is_file() {
            return Err(validation(
                &format!("{label}initial"),
                format!("referenced file does not exist: {}", full.display()),
            ));
        }
        Ok(())
    }
}

/// Worst-case Courant pre-estimate from empirical growth constants: bounds
/// `sup |w|` over the domain by `C_growth·(1 + R)` per field with `R` the
/// largest corner radius, sums the control box extremes, and compares
/// `τ·sup|w|·(1/h_a + 1/h_b)` against 1.  An exceedance is a warning, not
/// an error: the transport solver halves its step until the realized
/// per-cell rate fits.
fn cfl_warnings(
    spec: &GridSpec,
    basis: &[VectorField],
    drifts: &[Option<VectorField>],
    lo: &[f64],
    hi: &[f64],
    tau: f64,
) -> Vec<String> {
    let min = spec.min();
    let max = spec.max();
    let radius = {
        let corners = [
            [min[0], min[1]],
            [min[0], max[1]],
            [max[0], min[1]],
            [max[0], max[1]],
        ];
        corners
            .iter()
            .map(|c| (c[0] * c[0] + c[1] * c[1]).sqrt())
            .fold(0.0f64, f64::max)
    };
    let sup_of = |field: &VectorField| -> Option<f64> {
        validate_h1(field, &min, &max, 256).ok().map(|rep| rep.c_growth * (1.0 + radius))
    };
    let mut warnings = Vec::new();
    for (i, drift) in drifts.iter().enumerate() {
        let mut sup = 0.0f64;
        for (k, field) in basis.iter().enumerate() {
            match sup_of(field) {
                Some(s) => sup += lo[k].abs().max(hi[k].abs()) * s,
                None => return warnings,
            }
        }
        if let Some(field) = drift {
            match sup_of(field) {
                Some(s) => sup += s,
                None => return warnings,
            }
        }
        let courant = tau * sup * (1.0 / spec.h(0) + 1.0 / spec.h(1));
        if courant > 1.0 {
            warnings.push(format!(
                "population {}: worst-case Courant pre-estimate {courant:.2} exceeds 1 \
                 (bound from growth constants over the whole domain); the transport \
                 solver sub-steps automatically when the realized rate requires it",
                i + 1
            ));
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        Scenario::parse(text, PathBuf::from("."))
    }

    const MINIMAL: &str = "\
backend = particles
[time]
t_end = 1.0
steps = 10
[control]
basis = \"(1, -a)\"
lo = -1
hi = 1
[population]
initial = point 0 0
cost = \"b\"
";

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let s = parse(MINIMAL).unwrap();
        assert_eq!(s.backend, Backend::Particles);
        assert_eq!(s.seed, 0);
        assert_eq!(s.control.guess, vec![0.0]);
        assert_eq!(s.algorithm.alphas, vec![0.0, 0.75, 0.5, 0.25]);
        assert_eq!(s.algorithm.explores, vec![Some(1.0), Some(-1.0)]);
        assert_eq!(s.algorithm.partition, 1);
        assert!(s.algorithm.eps2.is_none());
        assert_eq!(s.populations.len(), 1);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn builtins_parse_clean() {
        for name in BUILTIN_NAMES {
            if name == "mnist36" {
                // References a user-supplied IDX file; validated at load
                // time against the working directory instead.
                continue;
            }
            let s = Scenario::parse(builtin_text(name).unwrap(), PathBuf::from(".")).unwrap();
            assert_eq!(s.name, name);
        }
    }

    #[test]
    fn example1_builtin_carries_the_published_data() {
        let s = parse(builtin_text("example1").unwrap()).unwrap();
        assert_eq!(s.backend, Backend::Particles);
        assert!((s.time.t_end() - 1.0).abs() < 1e-15);
        assert_eq!(s.control.basis, vec!["(1, -a)".to_string()]);
        assert_eq!(s.control.lo, vec![-1.0]);
        assert_eq!(s.control.hi, vec![1.0]);
        assert_eq!(s.control.guess, vec![0.0]);
        assert_eq!(s.populations[0].source, SourceSpec::Point(vec![0.0, 0.0]));
        assert_eq!(s.populations[0].cost, CostSpec::Expr("b".to_string()));
    }

    #[test]
    fn crossring_builtin_carries_the_published_data() {
        let s = parse(builtin_text("crossring").unwrap()).unwrap();
        assert_eq!(s.backend, Backend::Grid);
        let spec = s.grid.as_ref().unwrap();
        assert_eq!(spec.min(), [-5.0, -5.0]);
        assert_eq!(spec.max(), [5.0, 5.0]);
        assert!((spec.h(0) - 0.1).abs() < 1e-12);
        assert!((s.time.tau() - 0.004).abs() < 1e-12);
        assert!((s.time.t_end() - 2.0).abs() < 1e-15);
        assert_eq!(s.control.basis.len(), 3);
        assert_eq!(s.control.guess, vec![1.0, 0.0, 0.0]);
        assert_eq!(s.algorithm.alphas, vec![0.75]);
        assert_eq!(s.algorithm.max_outer, 30);
        assert_eq!(s.algorithm.partition, 20);
        assert_eq!(s.populations[0].cost, CostSpec::Target(vec![1.0, 1.0]));
        assert_eq!(s.populations[1].cost, CostSpec::Target(vec![-1.0, -1.0]));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "backend = particles\nnot a key value line\n";
        match parse(bad) {
            Err(ScenarioError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let bad = MINIMAL.replace("backend = particles", "backend = particles\nbackend = grid");
        assert!(matches!(parse(&bad), Err(ScenarioError::Parse { .. })));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("[time]", "[time]\nwibble = 3");
        assert!(matches!(parse(&bad), Err(ScenarioError::Parse { .. })));
    }

    #[test]
    fn grid_backend_requires_a_grid_section() {
        let bad = MINIMAL.replace("backend = particles", "backend = grid");
        match parse(&bad) {
            Err(ScenarioError::Validation { field, .. }) => assert_eq!(field, "[grid]"),
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_target_dimension_is_rejected() {
        let bad = MINIMAL.replace("cost = \"b\"", "cost = target 1 2 3");
        assert!(matches!(parse(&bad), Err(ScenarioError::Validation { .. })));
    }

    #[test]
    fn missing_referenced_file_is_a_validation_error() {
        let bad = MINIMAL.replace(
            "initial = point 0 0",
            "initial = atoms definitely_not_there.csv",
        );
        assert!(matches!(parse(&bad), Err(ScenarioError::Validation { .. })));
    }

    #[test]
    fn commas_inside_quotes_do_not_split_lists() {
        let text = MINIMAL.replace(
            "basis = \"(1, -a)\"",
            "basis = \"(1, -a)\", \"(0, 1)\"",
        );
        let mut s = parse(&text);
        // lo/hi broadcast from the single scalar to both components.
        let sc = s.as_mut().unwrap();
        assert_eq!(sc.control.basis.len(), 2);
        assert_eq!(sc.control.lo, vec![-1.0, -1.0]);
    }

    #[test]
    fn comments_are_stripped_outside_quotes() {
        let text = "# leading note\nbackend = particles # trailing note\n".to_string()
            + &MINIMAL.replace("backend = particles\n", "");
        let s = parse(&text).unwrap();
        assert_eq!(s.backend, Backend::Particles);
    }

    #[test]
    fn fast_dynamics_on_a_fine_grid_warn_about_the_courant_bound() {
        let text = "\
backend = grid
[time]
t_end = 1.0
steps = 10
[grid]
min = -1, -1
max = 1, 1
cells = 200, 200
[control]
basis = \"(1, -a)\"
lo = -50
hi = 50
[population]
initial = gaussian 0 0 0.2
cost = \"b\"
";
        let s = parse(text).unwrap();
        assert!(!s.warnings.is_empty(), "expected a Courant warning record");
        assert!(s.warnings[0].contains("sub-steps"));
    }
}
