//! CSV conventions shared by every subcommand: header row mandatory,
//! floating-point values written with 17 significant digits so files are
//! byte-stable and round-trip exactly.

/// Formats with 17 significant digits (1 leading + 16 fractional).
pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Splits CSV text into a header row and data rows. No quoting is used
/// by any of our schemas.
pub fn parse(text: &str) -> Option<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next()?.split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Some((header, rows))
}
