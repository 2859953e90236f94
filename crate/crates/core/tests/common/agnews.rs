//! AG News loading for the reproduction checks.
//!
//! `HYPERTEXT_AG_NEWS` names a directory holding either `train.txt` and
//! `test.txt` in `__label__<class> <text>` form, or the original
//! `train.csv` and `test.csv` (`"class","title","description"`), which are
//! normalised the way the fastText scripts do it.

use std::path::{Path, PathBuf};

pub const ENV_VAR: &str = "HYPERTEXT_AG_NEWS";

/// Lower-cases and splits off punctuation.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 16);
    for ch in text.replace("<br />", " ").chars() {
        match ch {
            '"' => {}
            ';' | ':' => out.push(' '),
            '\'' | '.' | ',' | '(' | ')' | '!' | '?' => {
                out.push(' ');
                out.push(ch);
                out.push(' ');
            }
            '\\' => out.push(' '),
            c => out.extend(c.to_lowercase()),
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn csv_to_lines(path: &Path) -> Result<Vec<String>, String> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let class = rec.get(0).ok_or("missing class column")?.trim();
        let text: Vec<&str> = rec.iter().skip(1).collect();
        lines.push(format!("__label__{class} {}", normalize(&text.join(" , "))));
    }
    Ok(lines)
}

/// Returns `(train, test)` paths in fastText format, converting CSV files into
/// `scratch` when needed.
pub fn locate(scratch: &Path) -> Result<(PathBuf, PathBuf), String> {
    let dir = std::env::var_os(ENV_VAR).ok_or_else(|| format!("{ENV_VAR} is not set"))?;
    let dir = PathBuf::from(dir);
    let (train, test) = (dir.join("train.txt"), dir.join("test.txt"));
    if train.is_file() && test.is_file() {
        return Ok((train, test));
    }
    let (train_csv, test_csv) = (dir.join("train.csv"), dir.join("test.csv"));
    if !(train_csv.is_file() && test_csv.is_file()) {
        return Err(format!("{} has neither train.txt/test.txt nor train.csv/test.csv", dir.display()));
    }
    let mut out = Vec::new();
    for (src, name) in [(train_csv, "ag_news.train"), (test_csv, "ag_news.test")] {
        let dst = scratch.join(name);
        std::fs::write(&dst, csv_to_lines(&src)?.join("\n") + "\n").map_err(|e| e.to_string())?;
        out.push(dst);
    }
    let test = out.pop().unwrap();
    Ok((out.pop().unwrap(), test))
}

