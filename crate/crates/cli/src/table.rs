//! Plain-text column alignment for stdout summaries.

/// Left-aligns the first column and right-aligns the rest, two spaces
/// between columns. Rows shorter than the header are padded with blanks.
pub fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().take(cols).enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let empty = String::new();
    for line in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        for i in 0..cols {
            let cell = line.get(i).unwrap_or(&empty);
            if i == 0 {
                out.push_str(&format!("{cell:<width$}", width = widths[0]));
            } else {
                out.push_str(&format!("  {cell:>width$}", width = widths[i]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}
