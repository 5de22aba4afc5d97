use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::connectome::{feature_count, vectorize_upper, ConnectivityMatrix};
use super::DataError;
use crate::matrix::Matrix;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Role of a view in a prediction task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewRole {
    Source,
    /// Target domain, numbered `1..=k` in ascending order of view id.
    Target(usize),
}

/// Subjects × features matrix for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub role: ViewRole,
    pub view_id: usize,
    pub values: Matrix,
}

/// Size summary of a population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetDims {
    pub subjects: usize,
    pub rois: usize,
    pub views: usize,
    pub features: usize,
}

/// Subjects × views of connectivity matrices over a common ROI set.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDataset {
    subject_ids: Vec<String>,
    view_ids: Vec<usize>,
    rois: usize,
    /// `matrices[subject][view position]`.
    matrices: Vec<Vec<ConnectivityMatrix>>,
}

impl PopulationDataset {
    /// Assembles a dataset, checking that every subject has every view at a common size.
    pub fn new(
        subject_ids: Vec<String>,
        view_ids: Vec<usize>,
        matrices: Vec<Vec<ConnectivityMatrix>>,
    ) -> Result<Self, DataError> {
        if subject_ids.len() != matrices.len() {
            return Err(DataError::Dimension(format!(
                "{} subject ids for {} matrix rows",
                subject_ids.len(),
                matrices.len()
            )));
        }
        if view_ids.is_empty() {
            return Err(DataError::Precondition("dataset needs at least one view".into()));
        }
        let mut sorted = view_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != view_ids {
            return Err(DataError::Precondition(format!(
                "view ids must be strictly ascending, got {view_ids:?}"
            )));
        }
        let rois = matrices.first().and_then(|m| m.first()).map_or(0, ConnectivityMatrix::r);
        for (sid, views) in subject_ids.iter().zip(&matrices) {
            if views.len() != view_ids.len() {
                return Err(DataError::Dimension(format!(
                    "subject {sid} has {} views, expected {}",
                    views.len(),
                    view_ids.len()
                )));
            }
            if let Some(bad) = views.iter().find(|m| m.r() != rois) {
                return Err(DataError::Dimension(format!(
                    "subject {sid} has a {}-ROI view, expected {rois}",
                    bad.r()
                )));
            }
        }
        Ok(Self {
            subject_ids,
            view_ids,
            rois,
            matrices,
        })
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn view_ids(&self) -> &[usize] {
        &self.view_ids
    }

    pub fn num_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn num_views(&self) -> usize {
        self.view_ids.len()
    }

    pub fn rois(&self) -> usize {
        self.rois
    }

    pub fn features(&self) -> usize {
        feature_count(self.rois)
    }

    pub fn dims(&self) -> DatasetDims {
        DatasetDims {
            subjects: self.num_subjects(),
            rois: self.rois,
            views: self.num_views(),
            features: self.features(),
        }
    }

    /// Position of a view id within this dataset.
    pub fn view_position(&self, view_id: usize) -> Option<usize> {
        self.view_ids.iter().position(|&v| v == view_id)
    }

    pub fn matrix(&self, subject: usize, view_pos: usize) -> &ConnectivityMatrix {
        &self.matrices[subject][view_pos]
    }

    /// All subjects' graphs for one view position.
    pub fn view_graphs(&self, view_pos: usize) -> Vec<ConnectivityMatrix> {
        self.matrices.iter().map(|m| m[view_pos].clone()).collect()
    }

    /// Vectorized graphs of one view stacked as an `s × f` matrix.
    pub fn feature_matrix(&self, view_pos: usize) -> Matrix {
        let f = self.features();
        let mut data = Vec::with_capacity(self.num_subjects() * f);
        for views in &self.matrices {
            data.extend(vectorize_upper(&views[view_pos]));
        }
        Matrix::from_vec(self.num_subjects(), f, data).expect("f entries per subject")
    }

    /// Feature matrices of every view, tagged relative to `source_pos`.
    pub fn tagged_features(&self, source_pos: usize) -> Vec<FeatureMatrix> {
        let mut t = 0;
        (0..self.num_views())
            .map(|p| {
                let role = if p == source_pos {
                    ViewRole::Source
                } else {
                    t += 1;
                    ViewRole::Target(t)
                };
                FeatureMatrix {
                    role,
                    view_id: self.view_ids[p],
                    values: self.feature_matrix(p),
                }
            })
            .collect()
    }

    /// Dataset restricted to the subjects at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            subject_ids: indices.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            view_ids: self.view_ids.clone(),
            rois: self.rois,
            matrices: indices.iter().map(|&i| self.matrices[i].clone()).collect(),
        }
    }

    /// Dataset restricted to the given view positions.
    pub fn select_views(&self, positions: &[usize]) -> Self {
        Self {
            subject_ids: self.subject_ids.clone(),
            view_ids: positions.iter().map(|&p| self.view_ids[p]).collect(),
            rois: self.rois,
            matrices: self
                .matrices
                .iter()
                .map(|m| positions.iter().map(|&p| m[p].clone()).collect())
                .collect(),
        }
    }

    /// Position of each of `ids` in this dataset.
    pub fn subject_positions(&self, ids: &[String]) -> Result<Vec<usize>, DataError> {
        ids.iter()
            .map(|id| {
                self.subject_ids
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| DataError::Precondition(format!("unknown subject id {id}")))
            })
            .collect()
    }
}

fn ingest_err(path: &Path, reason: impl Into<String>) -> DataError {
    DataError::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses one headerless `r × r` CSV matrix.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix, DataError> {
    let text = fs::read_to_string(path).map_err(|e| ingest_err(path, e.to_string()))?;
    parse_matrix_csv(&text).map_err(|reason| ingest_err(path, reason))
}

fn parse_matrix_csv(text: &str) -> Result<Matrix, String> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(col, tok)| {
                let tok = tok.trim();
                let v: f64 = tok
                    .parse()
                    .map_err(|_| format!("line {}: column {}: cannot parse {tok:?}", lineno + 1, col + 1))?;
                if v.is_nan() {
                    return Err(format!("line {}: column {}: NaN entry", lineno + 1, col + 1));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>, String>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(format!(
                    "line {}: {} columns, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                ));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err("empty matrix file".into());
    }
    if rows[0].len() != n {
        return Err(format!("{n} rows but {} columns", rows[0].len()));
    }
    Ok(Matrix::from_rows(&rows))
}

/// Reads and validates one connectivity matrix file.
pub fn read_connectivity_csv(path: &Path) -> Result<ConnectivityMatrix, DataError> {
    let m = read_matrix_csv(path)?;
    ConnectivityMatrix::new(m).map_err(|e| ingest_err(path, e.to_string()))
}

/// Formats a float with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::with_capacity(m.len() * 24);
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|&x| format_f64(x)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn view_dir(root: &Path, view_id: usize) -> PathBuf {
    root.join(format!("view_{view_id}"))
}

/// Loads `<root>/manifest.txt` and every `<root>/view_<k>/<subject>.csv`.
pub fn load_dataset(root: &Path) -> Result<PopulationDataset, DataError> {
    let manifest = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).map_err(|e| ingest_err(&manifest, e.to_string()))?;
    let subject_ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if subject_ids.is_empty() {
        return Err(ingest_err(&manifest, "manifest lists no subjects"));
    }

    let entries = fs::read_dir(root).map_err(|e| ingest_err(root, e.to_string()))?;
    let mut view_ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ingest_err(root, e.to_string()))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(id) = name.strip_prefix("view_").and_then(|s| s.parse::<usize>().ok()) {
            if entry.path().is_dir() {
                view_ids.push(id);
            }
        }
    }
    view_ids.sort_unstable();
    if view_ids.is_empty() {
        return Err(ingest_err(root, "no view_<k> directories"));
    }

    let mut rois: Option<usize> = None;
    let mut matrices = Vec::with_capacity(subject_ids.len());
    for sid in &subject_ids {
        let mut views = Vec::with_capacity(view_ids.len());
        for &v in &view_ids {
            let path = view_dir(root, v).join(format!("{sid}.csv"));
            let m = read_connectivity_csv(&path)?;
            match rois {
                None => rois = Some(m.r()),
                Some(r) if r != m.r() => {
                    return Err(ingest_err(&path, format!("{} ROIs, expected {r}", m.r())));
                }
                Some(_) => {}
            }
            views.push(m);
        }
        matrices.push(views);
    }
    PopulationDataset::new(subject_ids, view_ids, matrices).map_err(|e| ingest_err(root, e.to_string()))
}

/// Writes a dataset in the directory layout read by [`load_dataset`].
pub fn write_dataset(dataset: &PopulationDataset, root: &Path) -> Result<(), DataError> {
    let io = |path: &Path, e: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    fs::create_dir_all(root).map_err(|e| io(root, e))?;
    let manifest = root.join(MANIFEST_FILE);
    let mut text = String::new();
    for sid in dataset.subject_ids() {
        text.push_str(sid);
        text.push('\n');
    }
    fs::write(&manifest, text).map_err(|e| io(&manifest, e))?;
    for (p, &v) in dataset.view_ids().iter().enumerate() {
        let dir = view_dir(root, v);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        for (s, sid) in dataset.subject_ids().iter().enumerate() {
            let path = dir.join(format!("{sid}.csv"));
            let mut file = fs::File::create(&path).map_err(|e| io(&path, e))?;
            file.write_all(matrix_to_csv(dataset.matrix(s, p).weights()).as_bytes())
                .map_err(|e| io(&path, e))?;
        }
    }
    Ok(())
}

/// Train/test subject positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainTest {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// `floor(train_frac · s)` training subjects, the rest for testing.
    Ratio(f64),
    KFold(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Split {
    Holdout(TrainTest),
    Folds(Vec<Vec<usize>>),
}

fn shuffled(s: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

pub fn ratio_split(s: usize, train_frac: f64, seed: u64) -> Result<TrainTest, DataError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::Precondition(format!(
            "train fraction must lie in (0, 1), got {train_frac}"
        )));
    }
    let n = ((train_frac * s as f64) + 1e-9).floor() as usize;
    if n == 0 || n >= s {
        return Err(DataError::Precondition(format!(
            "split of {s} subjects at {train_frac} leaves an empty side"
        )));
    }
    let idx = shuffled(s, seed);
    let mut train = idx[..n].to_vec();
    let mut test = idx[n..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(TrainTest { train, test })
}

/// Partitions `0..s` into `folds` disjoint, near-equal folds.
pub fn kfold(s: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if folds < 2 {
        return Err(DataError::Precondition(format!("need at least 2 folds, got {folds}")));
    }
    if folds > s {
        return Err(DataError::Precondition(format!("{folds} folds exceed {s} subjects")));
    }
    let idx = shuffled(s, seed);
    let base = s / folds;
    let extra = s % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += len;
    }
    Ok(out)
}

/// Complement of fold `k` and the fold itself.
pub fn fold_train_test(folds: &[Vec<usize>], k: usize) -> TrainTest {
    let mut train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    train.sort_unstable();
    TrainTest {
        train,
        test: folds[k].clone(),
    }
}

pub fn split(dataset: &PopulationDataset, mode: SplitMode, seed: u64) -> Result<Split, DataError> {
    let s = dataset.num_subjects();
    if s == 0 {
        return Err(DataError::Precondition("empty dataset".into()));
    }
    match mode {
        SplitMode::Ratio(frac) => ratio_split(s, frac, seed).map(Split::Holdout),
        SplitMode::KFold(k) => kfold(s, k, seed).map(Split::Folds),
    }
}
