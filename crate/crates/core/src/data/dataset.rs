//! On-disk labeled datasets: `images/<id>.png`, a header-less `votes.csv` with
//! lines `id,vote1[,vote2[,vote3]]`, and an optional `classes.txt` naming one
//! class per line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::labels::derive_soft_label;
use crate::error::{Error, Result};
use crate::imgcore::ImageCrop;
use crate::losses::SoftLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCrop {
    pub id: String,
    pub image_path: PathBuf,
    pub votes: Vec<usize>,
    pub soft_label: SoftLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub crops: Vec<LabeledCrop>,
    /// Crops dropped for lacking a majority vote.
    pub excluded: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(id, majority class)` pairs for fold assignment.
    pub fn strata(&self) -> Vec<(String, usize)> {
        self.crops
            .iter()
            .map(|c| (c.id.clone(), c.soft_label.c1))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledCrop> {
        self.crops.iter().find(|c| c.id == id)
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && id != "."
        && id != ".."
}

/// Parses `votes.csv` into `(id, votes)` records.
pub fn read_votes(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec =
            rec.map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), line + 1)))?;
        let bad = |why: &str| Error::Data(format!("{} line {}: {why}", path.display(), line + 1));
        let id = rec.get(0).unwrap_or("");
        if !valid_id(id) {
            return Err(bad(&format!("invalid crop id {id:?}")));
        }
        if !(2..=4).contains(&rec.len()) {
            return Err(bad(&format!(
                "crop {id} has {} votes, expected 1 to 3",
                rec.len() - 1
            )));
        }
        let votes = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| bad(&format!("crop {id} has non-integer vote {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((id.to_string(), votes));
    }
    Ok(out)
}

pub fn write_votes(path: &Path, records: &[(String, Vec<usize>)]) -> Result<()> {
    let mut text = String::new();
    for (id, votes) in records {
        text.push_str(id);
        for v in votes {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

/// Loads and validates a dataset directory: every voted crop must have a
/// readable image of the common size, and votes must name known classes.
pub fn load_dataset(root: &Path, lambda: f64) -> Result<Dataset> {
    let records = read_votes(&root.join("votes.csv"))?;
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{} lists no crops",
            root.join("votes.csv").display()
        )));
    }
    let classes_path = root.join("classes.txt");
    let max_vote = records
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .max()
        .unwrap_or(0);
    let class_names: Vec<String> = if classes_path.exists() {
        fs::read_to_string(&classes_path)
            .map_err(|e| Error::io(&classes_path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        (0..=max_vote).map(|c| format!("class{c}")).collect()
    };
    if max_vote >= class_names.len() {
        return Err(Error::Data(format!(
            "vote {max_vote} exceeds the {} listed classes",
            class_names.len()
        )));
    }
    let mut crops = Vec::new();
    let mut excluded = Vec::new();
    let mut dims = None;
    let mut seen = std::collections::BTreeSet::new();
    for (id, votes) in records {
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("crop {id} listed twice in votes.csv")));
        }
        let path = image_path(root, &id);
        if !path.exists() {
            return Err(Error::Data(format!(
                "crop {id}: missing image {}",
                path.display()
            )));
        }
        let img = ImageCrop::load_png(&path)?;
        let d = (img.height(), img.width(), img.channels());
        match dims {
            None => dims = Some(d),
            Some(first) if first != d => {
                return Err(Error::Data(format!(
                    "crop {id}: image is {d:?}, expected {first:?}"
                )));
            }
            _ => {}
        }
        match derive_soft_label(&votes, lambda)? {
            Some(soft_label) => crops.push(LabeledCrop {
                id,
                image_path: path,
                votes,
                soft_label,
            }),
            None => {
                log::info!("excluding crop {id}: no majority in votes {votes:?}");
                excluded.push(id);
            }
        }
    }
    let (height, width, channels) = dims.expect("at least one record");
    Ok(Dataset {
        root: root.to_path_buf(),
        class_names,
        crops,
        excluded,
        height,
        width,
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_dataset(dir: &Path, votes: &str) {
        fs::create_dir_all(dir.join("images")).unwrap();
        for id in ["a", "b", "c"] {
            ImageCrop::filled(6, 6, 1, 0.5)
                .save_png(&image_path(dir, id))
                .unwrap();
        }
        fs::write(dir.join("votes.csv"), votes).unwrap();
        fs::write(dir.join("classes.txt"), "x\ny\nz\n").unwrap();
    }

    #[test]
    fn loads_and_excludes() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "a,0,0,0\nb,1,1,2\nc,0,1,2\n");
        let ds = load_dataset(dir.path(), 0.85).unwrap();
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.crops.len(), 2);
        assert_eq!(ds.excluded, vec!["c".to_string()]);
        assert_eq!(ds.get("b").unwrap().soft_label.c2, 2);
        assert_eq!((ds.height, ds.width, ds.channels), (6, 6, 1));
    }

    #[test]
    fn errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), "a,0\nd,1\n");
        let err = load_dataset(dir.path(), 0.85).unwrap_err().to_string();
        assert!(err.contains("crop d"), "{err}");
        write_dataset(dir.path(), "a,0\nb,x\n");
        let err = load_dataset(dir.path(), 0.85).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("crop b"), "{err}");
        write_dataset(dir.path(), "a,0,1,1,2\n");
        assert!(load_dataset(dir.path(), 0.85).is_err());
        write_dataset(dir.path(), "a,7\n");
        assert!(load_dataset(dir.path(), 0.85).is_err());
    }

    #[test]
    fn votes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            ("x1".to_string(), vec![0, 0, 1]),
            ("x2".to_string(), vec![3]),
        ];
        let p = dir.path().join("votes.csv");
        write_votes(&p, &recs).unwrap();
        assert_eq!(read_votes(&p).unwrap(), recs);
    }
}
