//! Two-column key/value table for terminal output.

use std::fmt::Display;

#[derive(Default)]
pub struct Table {
    rows: Vec<(String, String)>,
}

impl Table {
    pub fn new() -> Table {
        Table::default()
    }

    pub fn row(&mut self, key: impl Display, value: impl Display) {
        self.rows.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &self.rows {
            let pad = width - k.chars().count();
            out.push_str(&format!("{k}{}  {v}\n", " ".repeat(pad)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligns_values() {
        let mut t = Table::new();
        t.row("a", 1);
        t.row("long key", "x");
        assert_eq!(t.render(), "a         1\nlong key  x\n");
    }
}
