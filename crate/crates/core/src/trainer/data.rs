//! Token-grid datasets on disk.
//!
//! A dataset directory holds one grid per `*.tok` file (the grid text
//! format), read in file-name order. An optional `conditions.txt` assigns
//! condition tokens: each line is `file-name tok tok ...`; files without a
//! line get the empty condition.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::denoiser::Condition;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;

pub type Dataset = Vec<(TokenGrid, Condition)>;

pub const CONDITIONS_FILE: &str = "conditions.txt";

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|n| n.ends_with(".tok"));
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .tok files in {}",
            dir.display()
        )));
    }
    let mut conditions = BTreeMap::new();
    let cond_path = dir.join(CONDITIONS_FILE);
    if cond_path.exists() {
        for (n, line) in fs::read_to_string(&cond_path)?.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(name) = parts.next() else { continue };
            let toks = parts
                .map(|p| {
                    p.parse::<usize>().map_err(|_| {
                        Error::Format(format!("{CONDITIONS_FILE} line {}: bad token `{p}`", n + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            conditions.insert(name.to_string(), Condition::new(toks));
        }
        if let Some(unknown) = conditions.keys().find(|k| !names.contains(k)) {
            return Err(Error::Format(format!(
                "{CONDITIONS_FILE} names missing file `{unknown}`"
            )));
        }
    }
    let mut data = Vec::with_capacity(names.len());
    for name in &names {
        let grid = TokenGrid::read(dir.join(name))?;
        grid.ensure_mask_free()?;
        if let Some((first, _)) = data.first() {
            let first: &TokenGrid = first;
            if !grid.same_shape(first) {
                return Err(Error::DimensionMismatch(format!("{name} differs in shape")));
            }
        }
        let y = conditions.remove(name).unwrap_or_else(Condition::empty);
        data.push((grid, y));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_sorted_with_conditions() {
        let dir = tempfile::tempdir().unwrap();
        let a = TokenGrid::new(1, 2, 3, vec![0, 1]).unwrap();
        let b = TokenGrid::new(1, 2, 3, vec![2, 2]).unwrap();
        b.write(dir.path().join("b.tok")).unwrap();
        a.write(dir.path().join("a.tok")).unwrap();
        fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        fs::write(dir.path().join(CONDITIONS_FILE), "b.tok 1 0\n").unwrap();
        let data = load_dataset(dir.path()).unwrap();
        assert_eq!(data[0], (a, Condition::empty()));
        assert_eq!(data[1], (b, Condition::new(vec![1, 0])));
    }

    #[test]
    fn rejects_bad_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        assert!(load_dataset(dir.path().join("missing")).is_err());
        TokenGrid::new(1, 2, 3, vec![0, 1]).unwrap().write(dir.path().join("a.tok")).unwrap();
        TokenGrid::new(1, 3, 3, vec![0, 1, 2]).unwrap().write(dir.path().join("b.tok")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::remove_file(dir.path().join("b.tok")).unwrap();
        fs::write(dir.path().join(CONDITIONS_FILE), "zzz.tok 1\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
