//! Loader for the Cora citation network in its `.content` / `.cites` text
//! distribution.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use pmp_autodiff::Tensor;

use super::community::split_flags;
use super::GraphInstance;
use crate::error::{PmpError, Result};
use crate::graph::GraphTopology;

/// Training labels per class in the standard split.
pub const TRAIN_PER_CLASS: usize = 20;
pub const VAL_NODES: usize = 500;
pub const TEST_NODES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct CoraData {
    pub instance: GraphInstance,
    pub paper_ids: Vec<String>,
    pub class_names: Vec<String>,
    /// Citation lines naming an id absent from the content file.
    pub skipped_citations: usize,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| PmpError::io(format!("reading {}", path.display()), e))
}

/// Parses the two files. Classes are numbered in order of first
/// appearance. The split takes the first 20 nodes of each class for
/// training, the next 500 for validation and the last 1000 for testing
/// (fewer on small inputs).
pub fn load_cora(content_path: &Path, cites_path: &Path) -> Result<CoraData> {
    let content = read(content_path)?;
    let mut ids = Vec::new();
    let mut index = HashMap::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    let parse_err = |line: usize, msg: String| PmpError::Parse {
        path: content_path.to_path_buf(),
        line,
        msg,
    };
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 {
            return Err(parse_err(lineno, "expected id, features and label".into()));
        }
        let feats = &fields[1..fields.len() - 1];
        if let Some(first) = rows.first() {
            if first.len() != feats.len() {
                return Err(parse_err(
                    lineno,
                    format!(
                        "{} features, earlier lines have {}",
                        feats.len(),
                        first.len()
                    ),
                ));
            }
        }
        let row = feats
            .iter()
            .map(|f| match *f {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                other => Err(parse_err(
                    lineno,
                    format!("feature {other:?} is not 0 or 1"),
                )),
            })
            .collect::<Result<Vec<f32>>>()?;
        let id = fields[0].to_string();
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(parse_err(lineno, format!("duplicate paper id {id}")));
        }
        let label_name = fields[fields.len() - 1];
        let label = match class_names.iter().position(|c| c == label_name) {
            Some(l) => l,
            None => {
                class_names.push(label_name.to_string());
                class_names.len() - 1
            }
        };
        ids.push(id);
        rows.push(row);
        labels.push(label);
    }
    if ids.is_empty() {
        return Err(PmpError::Format(format!(
            "{} has no nodes",
            content_path.display()
        )));
    }

    let cites = read(cites_path)?;
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in cites.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[..] {
            [] => continue,
            [a, b] => match (index.get(a), index.get(b)) {
                (Some(&i), Some(&j)) => pairs.push((i, j)),
                _ => skipped += 1,
            },
            _ => {
                return Err(PmpError::Parse {
                    path: cites_path.to_path_buf(),
                    line: lineno + 1,
                    msg: "expected two paper ids".into(),
                })
            }
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} citations with unknown paper ids");
    }

    let n = ids.len();
    let topology = GraphTopology::from_undirected(n, &pairs)?;
    let features = Tensor::from_rows(&rows)?;
    let c = class_names.len();
    let train = TRAIN_PER_CLASS * c;
    let val = VAL_NODES.min(n.saturating_sub(train) / 2);
    let mut flags = split_flags(&labels, c, TRAIN_PER_CLASS, val);
    // Only the last TEST_NODES nodes are scored as test.
    let test_start = n.saturating_sub(TEST_NODES);
    for f in flags.iter_mut().take(test_start) {
        *f &= !super::TEST;
    }
    Ok(CoraData {
        instance: GraphInstance {
            features,
            topology,
            targets: labels,
            flags,
            n_classes: c,
        },
        paper_ids: ids,
        class_names,
        skipped_citations: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn parses_tiny_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let content = write(
            dir.path(),
            "t.content",
            "10 0 1 1 A\n20 1 0 0 B\n30 0 0 1 A\n",
        );
        let cites = write(dir.path(), "t.cites", "10 20\n20 30\n99 10\n");
        let data = load_cora(&content, &cites).unwrap();
        let g = &data.instance;
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.feature_dim(), 3);
        assert_eq!(g.n_classes, 2);
        assert_eq!(g.targets, vec![0, 1, 0]);
        assert_eq!(g.topology.n_edges(), 4);
        assert_eq!(data.skipped_citations, 1);
        assert!(g
            .topology
            .edges()
            .iter()
            .all(|&(s, d)| s < g.n_nodes() && d < g.n_nodes()));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let content = write(dir.path(), "t.content", "1 0 1 A\n2 0 x B\n");
        let cites = write(dir.path(), "t.cites", "");
        let err = load_cora(&content, &cites).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");

        let content = write(dir.path(), "u.content", "1 0 1 A\n2 0 B\n");
        assert!(load_cora(&content, &cites)
            .unwrap_err()
            .to_string()
            .contains(":2:"));

        let content = write(dir.path(), "v.content", "1 0 1 A\n");
        let cites = write(dir.path(), "v.cites", "1\n");
        assert!(load_cora(&content, &cites)
            .unwrap_err()
            .to_string()
            .contains(":1:"));
    }
}
