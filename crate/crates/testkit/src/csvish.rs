//! Minimal CSV splitting for the plain numeric artifacts the tools emit.
//! None of the writers quote or escape anything, so neither does this.

/// Split nonempty lines on commas, trimming whitespace.
pub fn parse(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|f| f.trim().to_string()).collect())
        .collect()
}

/// Values of the column named in the first (header) row.
pub fn column(rows: &[Vec<String>], header: &str) -> Option<Vec<String>> {
    let idx = rows.first()?.iter().position(|h| h == header)?;
    Some(rows[1..].iter().filter_map(|r| r.get(idx).cloned()).collect())
}

/// [`column`] parsed as floats; fails loudly on non-numeric fields.
pub fn float_column(rows: &[Vec<String>], header: &str) -> Option<Vec<f64>> {
    column(rows, header).map(|vals| {
        vals.iter()
            .map(|v| v.parse().unwrap_or_else(|_| panic!("non-numeric field {v:?} in {header}")))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_projects_columns() {
        let rows = parse("iter,cost\n0, -0.5\n1,-0.75\n\n");
        assert_eq!(rows.len(), 3);
        assert_eq!(column(&rows, "iter").unwrap(), vec!["0", "1"]);
        assert_eq!(float_column(&rows, "cost").unwrap(), vec![-0.5, -0.75]);
        assert!(column(&rows, "missing").is_none());
    }
}
