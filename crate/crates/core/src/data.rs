//! Sequences on disk and in memory: the CSV contract, dataset manifests,
//! per-frame input normalization, the filter-duration heuristic and
//! cross-validation splits.
//!
//! # CSV layout
//!
//! ```text
//! # frame_period=0.0333333
//! # source_id=user3_trial2
//! feature_0,feature_1,feature_2,label
//! 0.25,1.5,0,1
//! ...
//! ```
//!
//! Comment lines start with `#` and may appear anywhere; the two recognised
//! keys are `frame_period` (seconds, default 1) and `source_id`. Floats are
//! written with the shortest representation that parses back to the same
//! bits. Labels are integers in `1..=C`.
//!
//! # Manifest layout
//!
//! One sequence path per line, relative paths resolved against the
//! manifest's directory, optionally followed by whitespace and
//! `group=<name>`. Blank lines and `#` comments are ignored.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TcnError};
use crate::layers::norm_denominator;
use crate::metrics::collapse;
use crate::tensor::Matrix;

/// Per-frame input features, `F_0 x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub values: Matrix,
    pub frame_period: f64,
    pub source_id: String,
}

impl FeatureSequence {
    pub fn new(values: Matrix, frame_period: f64, source_id: impl Into<String>) -> Result<Self> {
        let s = Self {
            values,
            frame_period,
            source_id: source_id.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn feature_dim(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.cols() == 0 || self.values.rows() == 0 {
            return Err(TcnError::Invalid(format!(
                "feature sequence `{}` is empty ({})",
                self.source_id, self.values
            )));
        }
        if !self.values.is_finite() {
            return Err(TcnError::Invalid(format!(
                "feature sequence `{}` has non-finite values",
                self.source_id
            )));
        }
        if !(self.frame_period > 0.0 && self.frame_period.is_finite()) {
            return Err(TcnError::Invalid(format!(
                "frame period must be positive, got {}",
                self.frame_period
            )));
        }
        Ok(())
    }
}

/// Frame labels `1..=C` with an optional validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    pub labels: Vec<usize>,
    pub mask: Option<Vec<bool>>,
}

impl LabelSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels, mask: None }
    }

    pub fn with_mask(labels: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != labels.len() {
            return Err(TcnError::shape("label mask", labels.len(), mask.len()));
        }
        Ok(Self {
            labels,
            mask: Some(mask),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_valid(&self, t: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[t])
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub features: FeatureSequence,
    pub labels: LabelSequence,
}

impl LabeledSequence {
    pub fn new(features: FeatureSequence, labels: LabelSequence) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(TcnError::shape(
                "label count vs frame count",
                features.len(),
                labels.len(),
            ));
        }
        if labels.labels.contains(&0) {
            return Err(TcnError::Invalid("class ids start at 1".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

pub type Dataset = Vec<LabeledSequence>;

/// Checks that a dataset is non-empty with one feature width and labels in `1..=C`.
/// Returns `(F_0, max label)`.
pub fn check_dataset(dataset: &[LabeledSequence], num_classes: Option<usize>) -> Result<(usize, usize)> {
    let first = dataset
        .first()
        .ok_or_else(|| TcnError::Invalid("dataset is empty".into()))?;
    let dim = first.features.feature_dim();
    let mut max_label = 0;
    for seq in dataset {
        if seq.features.feature_dim() != dim {
            return Err(TcnError::Invalid(format!(
                "sequence `{}` has {} features, expected {}",
                seq.features.source_id,
                seq.features.feature_dim(),
                dim
            )));
        }
        max_label = max_label.max(seq.labels.max_label());
    }
    if let Some(c) = num_classes {
        if max_label > c {
            return Err(TcnError::Invalid(format!(
                "label {max_label} exceeds the number of classes {c}"
            )));
        }
    }
    Ok((dim, max_label))
}

fn parse_err(path: &Path, line: usize, column: usize, message: impl Into<String>) -> TcnError {
    TcnError::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// Reads one sequence in the CSV layout described in the module docs.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<LabeledSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TcnError::io(path, e))?;
    parse_sequence(&text, path)
}

/// Reads features from a sequence CSV whose `label` column is optional.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TcnError::io(path, e))?;
    parse_table(&text, path).map(|(f, _)| f)
}

fn parse_sequence(text: &str, path: &Path) -> Result<LabeledSequence> {
    let (features, labels) = parse_table(text, path)?;
    let labels = labels.ok_or_else(|| parse_err(path, 1, 1, "header must end with `label`"))?;
    LabeledSequence::new(features, LabelSequence::new(labels))
}

fn parse_table(text: &str, path: &Path) -> Result<(FeatureSequence, Option<Vec<usize>>)> {
    let mut frame_period = 1.0;
    let mut source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut header: Option<usize> = None;
    let mut has_label = false;
    let mut rows = 0usize;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("frame_period=") {
                frame_period = v
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|p| *p > 0.0 && p.is_finite())
                    .ok_or_else(|| parse_err(path, lineno, 1, format!("bad frame_period `{v}`")))?;
            } else if let Some(v) = comment.strip_prefix("source_id=") {
                source_id = v.trim().to_string();
            }
            continue;
        }

        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let Some(n_features) = header else {
            has_label = cells.last() == Some(&"label");
            let n = cells.len() - usize::from(has_label);
            if n == 0 {
                return Err(parse_err(path, lineno, 1, "header names no feature columns"));
            }
            for (i, cell) in cells[..n].iter().enumerate() {
                if *cell != format!("feature_{i}") {
                    return Err(parse_err(
                        path,
                        lineno,
                        i + 1,
                        format!("expected `feature_{i}`, found `{cell}`"),
                    ));
                }
            }
            header = Some(n);
            columns = vec![Vec::new(); n];
            continue;
        };

        let width = n_features + usize::from(has_label);
        if cells.len() != width {
            return Err(parse_err(
                path,
                lineno,
                cells.len().min(width),
                format!("expected {width} cells, found {}", cells.len()),
            ));
        }
        for (i, cell) in cells[..n_features].iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, lineno, i + 1, format!("not a number: `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, i + 1, format!("non-finite value `{cell}`")));
            }
            columns[i].push(v);
        }
        rows += 1;
        if !has_label {
            continue;
        }
        let label_cell = cells[n_features];
        let label: usize = label_cell
            .parse()
            .ok()
            .filter(|&l| l >= 1)
            .ok_or_else(|| {
                parse_err(
                    path,
                    lineno,
                    n_features + 1,
                    format!("label must be an integer >= 1, found `{label_cell}`"),
                )
            })?;
        labels.push(label);
    }

    let Some(n_features) = header else {
        return Err(parse_err(path, 1, 1, "missing header"));
    };
    if rows == 0 {
        return Err(parse_err(path, 1, 1, "no frames"));
    }
    let values = Matrix::from_vec(n_features, rows, columns.concat());
    let features = FeatureSequence::new(values, frame_period, source_id)?;
    Ok((features, has_label.then_some(labels)))
}

/// Renders a sequence in the CSV layout.
pub fn sequence_to_csv(seq: &LabeledSequence) -> String {
    let f = &seq.features;
    let mut out = String::new();
    out.push_str(&format!("# frame_period={}\n", f.frame_period));
    out.push_str(&format!("# source_id={}\n", f.source_id));
    for i in 0..f.feature_dim() {
        out.push_str(&format!("feature_{i},"));
    }
    out.push_str("label\n");
    for t in 0..f.len() {
        for i in 0..f.feature_dim() {
            out.push_str(&format!("{},", f.values.get(i, t)));
        }
        out.push_str(&format!("{}\n", seq.labels.labels[t]));
    }
    out
}

pub fn save_sequence(seq: &LabeledSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, sequence_to_csv(seq)).map_err(|e| TcnError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub group: Option<String>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TcnError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let file = parts.next().unwrap_or_default();
        let mut group = None;
        for extra in parts {
            match extra.strip_prefix("group=") {
                Some(g) if !g.is_empty() => group = Some(g.to_string()),
                _ => {
                    return Err(parse_err(
                        path,
                        idx + 1,
                        line.find(extra).unwrap_or(0) + 1,
                        format!("unexpected token `{extra}`"),
                    ))
                }
            }
        }
        let p = Path::new(file);
        let resolved = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        entries.push(ManifestEntry {
            path: resolved,
            group,
        });
    }
    if entries.is_empty() {
        return Err(TcnError::Invalid(format!("manifest {} lists no sequences", path.display())));
    }
    Ok(entries)
}

/// Writes a manifest with paths relative to the manifest's own directory.
pub fn save_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut file = fs::File::create(path).map_err(|e| TcnError::io(path, e))?;
    for e in entries {
        let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
        let line = match &e.group {
            Some(g) => format!("{} group={g}\n", rel.display()),
            None => format!("{}\n", rel.display()),
        };
        file.write_all(line.as_bytes()).map_err(|e| TcnError::io(path, e))?;
    }
    Ok(())
}

/// Loads every sequence named by a manifest. A `group=` suffix replaces the
/// sequence's `source_id`.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let entries = load_manifest(manifest)?;
    let mut dataset = Vec::with_capacity(entries.len());
    for entry in entries {
        let mut seq = load_sequence(&entry.path)?;
        if let Some(g) = entry.group {
            seq.features.source_id = g;
        }
        dataset.push(seq);
    }
    check_dataset(&dataset, None)?;
    Ok(dataset)
}

/// Divides every frame by `max(frame max, 0) + eps`, the same rule the
/// network applies between layers.
pub fn input_channel_norm(x: &FeatureSequence) -> FeatureSequence {
    let mut values = x.values.clone();
    let (rows, cols) = values.shape();
    for t in 0..cols {
        let m = (0..rows).map(|r| values.get(r, t)).fold(f64::NEG_INFINITY, f64::max);
        let s = norm_denominator(m);
        for r in 0..rows {
            values.set(r, t, values.get(r, t) / s);
        }
    }
    FeatureSequence {
        values,
        frame_period: x.frame_period,
        source_id: x.source_id.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterDuration {
    pub frames: usize,
    pub seconds: f64,
    /// Class whose mean segment duration was smallest.
    pub class_id: usize,
}

/// Mean segment duration of the class with the shortest mean, rounded to the
/// nearest frame (at least 1).
pub fn estimate_filter_duration(labels: &[LabelSequence], frame_period: f64) -> Result<FilterDuration> {
    let mut totals: Vec<(usize, usize)> = Vec::new();
    for seq in labels.iter().filter(|s| !s.is_empty()) {
        for seg in collapse(&seq.labels) {
            if totals.len() <= seg.class_id {
                totals.resize(seg.class_id + 1, (0, 0));
            }
            totals[seg.class_id].0 += seg.len();
            totals[seg.class_id].1 += 1;
        }
    }
    let mut best: Option<(f64, usize)> = None;
    for (class_id, &(frames, count)) in totals.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let mean = frames as f64 / count as f64;
        if best.is_none_or(|(m, _)| mean < m) {
            best = Some((mean, class_id));
        }
    }
    let (mean, class_id) =
        best.ok_or_else(|| TcnError::Invalid("no labelled segments to estimate filter duration".into()))?;
    let frames = (mean.round() as usize).max(1);
    Ok(FilterDuration {
        frames,
        seconds: frames as f64 * frame_period,
        class_id,
    })
}

/// One cross-validation fold: indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct `source_id`, in lexicographic group order.
pub fn split_leave_one_group_out(dataset: &[LabeledSequence]) -> Result<Vec<Fold>> {
    let mut groups: Vec<&str> = dataset.iter().map(|s| s.features.source_id.as_str()).collect();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < 2 {
        return Err(TcnError::Invalid(format!(
            "leave-one-group-out needs at least 2 groups, found {}",
            groups.len()
        )));
    }
    Ok(groups
        .into_iter()
        .map(|g| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| dataset[i].features.source_id == g);
            Fold {
                name: g.to_string(),
                train,
                test,
            }
        })
        .collect())
}

/// Shuffled partition into `k` folds whose sizes differ by at most one.
pub fn split_k_fold(dataset_len: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(TcnError::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > dataset_len {
        return Err(TcnError::Config(format!(
            "k-fold with k={k} on {dataset_len} sequences"
        )));
    }
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = dataset_len / k;
    let extra = dataset_len % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[start..start + size].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold {
            name: format!("fold_{f}"),
            train,
            test,
        });
        start += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &str) -> LabelSequence {
        LabelSequence::new(s.bytes().map(|b| (b - b'A' + 1) as usize).collect())
    }

    fn seq(id: &str, t: usize) -> LabeledSequence {
        LabeledSequence::new(
            FeatureSequence::new(Matrix::zeros(2, t), 1.0, id).unwrap(),
            LabelSequence::new(vec![1; t]),
        )
        .unwrap()
    }

    #[test]
    fn parses_well_formed_csv() {
        let text = "# frame_period=0.5\n# source_id=u1\nfeature_0,feature_1,feature_2,label\n\
                    1,2,3,1\n4,5,6,2\n7,8,9,2\n0.5,-1e-3,2,3\n";
        let s = parse_sequence(text, Path::new("x.csv")).unwrap();
        assert_eq!(s.features.values.shape(), (3, 4));
        assert_eq!(s.features.values.row(0), &[1.0, 4.0, 7.0, 0.5]);
        assert_eq!(s.labels.labels, vec![1, 2, 2, 3]);
        assert_eq!(s.features.frame_period, 0.5);
        assert_eq!(s.features.source_id, "u1");
    }

    #[test]
    fn rejects_bad_cells_with_position() {
        let text = "feature_0,feature_1,label\n1,2,1\n3,NaN,1\n";
        match parse_sequence(text, Path::new("x.csv")).unwrap_err() {
            TcnError::Parse { line, column, .. } => assert_eq!((line, column), (3, 2)),
            e => panic!("{e}"),
        }
        let ragged = "feature_0,feature_1,label\n1,2,1\n3,1\n";
        assert!(matches!(
            parse_sequence(ragged, Path::new("x.csv")).unwrap_err(),
            TcnError::Parse { line: 3, .. }
        ));
        let bad_label = "feature_0,label\n1,0\n";
        assert!(matches!(
            parse_sequence(bad_label, Path::new("x.csv")).unwrap_err(),
            TcnError::Parse { line: 2, column: 2, .. }
        ));
        let inf = "feature_0,label\ninf,1\n";
        assert!(parse_sequence(inf, Path::new("x.csv")).is_err());
        assert!(parse_sequence("feature_0,label\n", Path::new("x.csv")).is_err());
    }

    #[test]
    fn label_column_is_optional_for_features() {
        let text = "feature_0,feature_1\n1,2\n3,4\n5,6\n";
        let (f, labels) = parse_table(text, Path::new("x.csv")).unwrap();
        assert_eq!(f.values.shape(), (2, 3));
        assert!(labels.is_none());
        assert!(parse_sequence(text, Path::new("x.csv")).is_err());
        let (_, labels) = parse_table("feature_0,label\n1,2\n", Path::new("x.csv")).unwrap();
        assert_eq!(labels, Some(vec![2]));
    }

    #[test]
    fn input_norm_rules() {
        let x = FeatureSequence::new(Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 4.0]]), 1.0, "a").unwrap();
        let y = input_channel_norm(&x);
        assert_eq!(y.values.column(0), vec![0.0, 0.0]);
        assert_eq!(y.values.column(1), vec![2.0 / (4.0 + 1e-5), 4.0 / (4.0 + 1e-5)]);
    }

    #[test]
    fn filter_duration_from_hand_counts() {
        let d = estimate_filter_duration(&[labels("AABBB")], 0.1).unwrap();
        assert_eq!((d.frames, d.class_id), (2, 1));
        assert!((d.seconds - 0.2).abs() < 1e-12);

        let d = estimate_filter_duration(&[labels("AAAABBBBCCCCAAAA")], 1.0).unwrap();
        assert_eq!(d.frames, 4);

        // A: (1+2)/2 = 1.5 rounds to 2, B: 3
        let d = estimate_filter_duration(&[labels("ABBBAA")], 1.0).unwrap();
        assert_eq!(d.frames, 2);

        assert!(estimate_filter_duration(&[], 1.0).is_err());
    }

    #[test]
    fn filter_duration_at_thirty_fps() {
        // shortest class averages 300 frames = 10 s at 30 frames/s
        let mut l = vec![1; 300];
        l.extend(vec![2; 900]);
        l.extend(vec![1; 300]);
        let d = estimate_filter_duration(&[LabelSequence::new(l)], 1.0 / 30.0).unwrap();
        assert_eq!(d.frames, 300);
        assert!((d.seconds - 10.0).abs() < 1e-9);
    }

    #[test]
    fn filter_duration_order_and_duplication_invariant() {
        let set = vec![labels("AABBBCA"), labels("CCCCAB"), labels("BBBBBBAAC")];
        let d = estimate_filter_duration(&set, 1.0).unwrap();
        let mut rev = set.clone();
        rev.reverse();
        assert_eq!(estimate_filter_duration(&rev, 1.0).unwrap(), d);
        let doubled: Vec<_> = set.iter().chain(&set).cloned().collect();
        assert_eq!(estimate_filter_duration(&doubled, 1.0).unwrap(), d);
    }

    #[test]
    fn logo_folds_partition() {
        let data: Vec<_> = ["b", "a", "c", "a", "d", "b"].iter().map(|g| seq(g, 3)).collect();
        let folds = split_leave_one_group_out(&data).unwrap();
        assert_eq!(folds.len(), 4);
        assert_eq!(folds[0].name, "a");
        assert_eq!(folds[0].test, vec![1, 3]);
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), 6);
            assert!(f.train.iter().all(|i| !f.test.contains(i)));
        }
        assert!(split_leave_one_group_out(&data[..1]).is_err());
    }

    #[test]
    fn k_fold_sizes_and_determinism() {
        let folds = split_k_fold(50, 5, 7).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 10 && f.train.len() == 40));
        assert_eq!(folds, split_k_fold(50, 5, 7).unwrap());
        assert_ne!(folds, split_k_fold(50, 5, 8).unwrap());
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());

        let uneven = split_k_fold(7, 3, 0).unwrap();
        let sizes: Vec<_> = uneven.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);

        assert!(split_k_fold(50, 1, 0).is_err());
        assert!(split_k_fold(3, 4, 0).is_err());
    }

    #[test]
    fn dataset_consistency_checks() {
        let a = seq("a", 3);
        let mut b = seq("b", 3);
        b.features.values = Matrix::zeros(3, 3);
        assert!(check_dataset(&[a.clone(), b], None).is_err());
        assert!(check_dataset(&[], None).is_err());
        assert_eq!(check_dataset(std::slice::from_ref(&a), Some(2)).unwrap(), (2, 1));
        let mut c = a;
        c.labels.labels[0] = 4;
        assert!(check_dataset(&[c], Some(3)).is_err());
    }
}
