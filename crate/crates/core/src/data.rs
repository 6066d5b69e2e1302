//! Domain records, pseudo-label state and the dataset CSV format.
//!
//! Dataset files have a header row
//! `sample_id,domain,gt_label,cam_id,f0,f1,...,f{D_in-1}` where `domain` is
//! `src` or `tgt`, absent labels and cameras are written as `-1`, and
//! features are decimal floats. Files are UTF-8 with LF line endings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "src",
            Domain::Target => "tgt",
        }
    }

    fn parse(s: &str) -> Option<Domain> {
        match s {
            "src" => Some(Domain::Source),
            "tgt" => Some(Domain::Target),
            _ => None,
        }
    }
}

/// One data point.
///
/// The ground-truth label is private: training code that is not running an
/// oracle or evaluation has no accessor for it other than
/// [`SampleRecord::eval_label`], which is the only path out.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub domain: Domain,
    gt_label: Option<u32>,
    pub cam_id: Option<u32>,
    pub input: Vec<f64>,
}

impl SampleRecord {
    pub fn new(
        sample_id: usize,
        domain: Domain,
        gt_label: Option<u32>,
        cam_id: Option<u32>,
        input: Vec<f64>,
    ) -> Self {
        SampleRecord {
            sample_id,
            domain,
            gt_label,
            cam_id,
            input,
        }
    }

    /// Ground-truth identity. Source labels are training supervision; for
    /// target records this is for evaluation and the oracle run only.
    pub fn eval_label(&self) -> Option<u32> {
        self.gt_label
    }

    pub fn has_label(&self) -> bool {
        self.gt_label.is_some()
    }
}

/// Outcome of pseudo-labelling one target instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assignment {
    Clustered(usize),
    Outlier,
}

/// Per-instance cluster assignment for the whole target set.
///
/// Cluster ids are dense and every cluster has at least two members; the
/// constructor checks both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelState {
    assignments: Vec<Assignment>,
    n_clusters: usize,
}

impl PseudoLabelState {
    pub fn new(assignments: Vec<Assignment>) -> Result<Self> {
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for a in &assignments {
            if let Assignment::Clustered(c) = a {
                *sizes.entry(*c).or_default() += 1;
            }
        }
        for (expected, (&id, &size)) in sizes.iter().enumerate() {
            if id != expected {
                return Err(Error::Contract(format!(
                    "cluster ids are not dense: expected {expected}, found {id}"
                )));
            }
            if size < 2 {
                return Err(Error::Contract(format!("cluster {id} has {size} member(s)")));
            }
        }
        Ok(PseudoLabelState {
            n_clusters: sizes.len(),
            assignments,
        })
    }

    pub fn all_outliers(n: usize) -> Self {
        PseudoLabelState {
            assignments: vec![Assignment::Outlier; n],
            n_clusters: 0,
        }
    }

    /// Builds a state from optional raw ids: ids are re-densified in order of
    /// first appearance and singletons become outliers.
    pub fn from_raw_labels(raw: &[Option<usize>]) -> Self {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for id in raw.iter().flatten() {
            *counts.entry(*id).or_default() += 1;
        }
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let assignments = raw
            .iter()
            .map(|r| match r {
                Some(id) if counts[id] >= 2 => {
                    let next = remap.len();
                    Assignment::Clustered(*remap.entry(*id).or_insert(next))
                }
                _ => Assignment::Outlier,
            })
            .collect();
        PseudoLabelState {
            assignments,
            n_clusters: remap.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_outliers(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| **a == Assignment::Outlier)
            .count()
    }

    pub fn assignment(&self, i: usize) -> Assignment {
        self.assignments[i]
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    /// Labels suitable for NMI: cluster id, or `None` for outliers.
    pub fn labels(&self) -> Vec<Option<usize>> {
        self.assignments
            .iter()
            .map(|a| match a {
                Assignment::Clustered(c) => Some(*c),
                Assignment::Outlier => None,
            })
            .collect()
    }
}

/// Members of each cluster (ascending indices) and the outlier indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub clusters: BTreeMap<usize, Vec<usize>>,
    pub outliers: Vec<usize>,
}

pub fn split_by_pseudo_label(state: &PseudoLabelState) -> Split {
    let mut split = Split::default();
    for (i, a) in state.assignments.iter().enumerate() {
        match a {
            Assignment::Clustered(c) => split.clusters.entry(*c).or_default().push(i),
            Assignment::Outlier => split.outliers.push(i),
        }
    }
    for (id, members) in &split.clusters {
        assert!(members.len() >= 2, "cluster {id} has fewer than two members");
    }
    split
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<SampleRecord>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.starts_with("sample_id,domain,gt_label,cam_id") => {}
        Some(_) => return Err(parse_err(1, "missing or malformed header".into())),
        None => return Ok(Vec::new()),
    }

    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    let mut next_id: BTreeMap<Domain, usize> = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 5 {
            return Err(parse_err(
                lineno,
                format!("expected at least 5 columns, found {}", cols.len()),
            ));
        }
        let domain = Domain::parse(cols[1].trim())
            .ok_or_else(|| parse_err(lineno, format!("unknown domain {:?}", cols[1])))?;
        let optional = |s: &str, what: &str| -> Result<Option<u32>> {
            let v: i64 = s
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("non-integer {what} {s:?}")))?;
            match v {
                -1 => Ok(None),
                v if v >= 0 && v <= u32::MAX as i64 => Ok(Some(v as u32)),
                _ => Err(parse_err(lineno, format!("{what} out of range: {v}"))),
            }
        };
        cols[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(lineno, format!("non-integer sample_id {:?}", cols[0])))?;
        let gt_label = optional(cols[2], "gt_label")?;
        let cam_id = optional(cols[3], "cam_id")?;
        let input = cols[4..]
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("non-numeric feature {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(input.len()),
            Some(d) if d != input.len() => {
                return Err(Error::DimensionMismatch {
                    path: path.to_path_buf(),
                    line: lineno,
                    expected: d,
                    found: input.len(),
                })
            }
            Some(_) => {}
        }
        if domain == Domain::Source && gt_label.is_none() {
            return Err(parse_err(lineno, "source record without gt_label".into()));
        }
        let id = next_id.entry(domain).or_default();
        records.push(SampleRecord::new(*id, domain, gt_label, cam_id, input));
        *id += 1;
    }
    Ok(records)
}

/// Decimal rendering rounded to 9 significant digits, shortest form.
pub fn format_float(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    format!("{rounded}")
}

pub fn render_dataset(records: &[SampleRecord]) -> String {
    let dim = records.first().map_or(0, |r| r.input.len());
    let mut out = String::from("sample_id,domain,gt_label,cam_id");
    for k in 0..dim {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for r in records {
        let opt = |v: Option<u32>| v.map_or_else(|| "-1".to_string(), |v| v.to_string());
        let _ = write!(
            out,
            "{},{},{},{}",
            r.sample_id,
            r.domain.tag(),
            opt(r.gt_label),
            opt(r.cam_id)
        );
        for x in &r.input {
            out.push(',');
            out.push_str(&format_float(*x));
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_dataset(records)).map_err(|e| Error::io(path, e))
}
