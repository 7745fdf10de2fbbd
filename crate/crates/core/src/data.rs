//! Datasets, group structure and standardization.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PptError, Result};

/// Covariates, responses and group membership.
///
/// Groups are stored as contiguous 0-based indices; `labels()[h]` holds the
/// original positive label that was mapped to index `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    groups: Vec<usize>,
    labels: Vec<i64>,
}

impl Dataset {
    /// Builds a dataset from raw positive group labels, relabelling them to
    /// `0..H` in increasing label order.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, labels: &[i64]) -> Result<Self> {
        if labels.iter().any(|&l| l < 1) {
            return Err(PptError::invalid("group labels must be ≥ 1"));
        }
        let mut distinct: Vec<i64> = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let groups = labels
            .iter()
            .map(|l| distinct.binary_search(l).expect("label present"))
            .collect();
        Self::build(x, y, groups, distinct)
    }

    /// Builds a dataset from 0-based group indices, which must cover `0..H`.
    pub fn from_groups(x: DMatrix<f64>, y: DVector<f64>, groups: Vec<usize>) -> Result<Self> {
        let h = groups.iter().copied().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; h];
        for &g in &groups {
            seen[g] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(PptError::invalid("group indices must be contiguous from 0"));
        }
        let labels = (1..=h as i64).collect();
        Self::build(x, y, groups, labels)
    }

    fn build(x: DMatrix<f64>, y: DVector<f64>, groups: Vec<usize>, labels: Vec<i64>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(PptError::invalid(format!("need at least 2 observations, got {n}")));
        }
        if x.nrows() != n || groups.len() != n {
            return Err(PptError::Dimension(format!(
                "X has {} rows, Y has {n} entries, Z has {} entries",
                x.nrows(),
                groups.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(PptError::invalid("at least one covariate column is required"));
        }
        if let Some(i) = (0..n).find(|&i| !y[i].is_finite()) {
            return Err(PptError::invalid(format!("non-finite response at row {}", i + 1)));
        }
        if let Some((i, _)) = x.row_iter().enumerate().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
            return Err(PptError::invalid(format!("non-finite covariate at row {}", i + 1)));
        }
        Ok(Dataset { x, y, groups, labels })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// 0-based group index per observation.
    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Original label for each group index.
    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_groups(&self) -> usize {
        self.labels.len()
    }

    /// Same covariates and groups with a replacement response.
    pub fn with_y(&self, y: DVector<f64>) -> Result<Self> {
        Self::build(self.x.clone(), y, self.groups.clone(), self.labels.clone())
    }

    pub fn with_x(&self, x: DMatrix<f64>) -> Result<Self> {
        Self::build(x, self.y.clone(), self.groups.clone(), self.labels.clone())
    }

    /// Rows in `idx` as a single-group dataset.
    pub fn subset(&self, idx: &[usize]) -> DatasetView {
        DatasetView {
            x: self.x.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
        }
    }

    pub fn group_index(&self) -> GroupIndex {
        group_index(self)
    }
}

/// Covariates and responses of a row subset.
#[derive(Debug, Clone)]
pub struct DatasetView {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    members: Vec<Vec<usize>>,
}

impl GroupIndex {
    /// Sorted row indices of group `h` (0-based).
    pub fn members(&self, h: usize) -> &[usize] {
        &self.members[h]
    }

    pub fn all(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn n_groups(&self) -> usize {
        self.members.len()
    }
}

pub fn group_index(ds: &Dataset) -> GroupIndex {
    let mut members = vec![Vec::new(); ds.n_groups()];
    for (i, &g) in ds.groups().iter().enumerate() {
        members[g].push(i);
    }
    GroupIndex { members }
}

/// Location/scale used to standardize a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationState {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
    pub applied: bool,
}

impl StandardizationState {
    pub fn identity(d: usize) -> Self {
        StandardizationState {
            x_mean: vec![0.0; d],
            x_sd: vec![1.0; d],
            y_mean: 0.0,
            y_sd: 1.0,
            applied: false,
        }
    }

    /// Maps standardized data back to the original scale.
    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        let mut x = ds.x().clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.apply(|v| *v = *v * self.x_sd[j] + self.x_mean[j]);
        }
        let y = ds.y().map(|v| v * self.y_sd + self.y_mean);
        Dataset::build(x, y, ds.groups.clone(), ds.labels.clone())
    }
}

pub(crate) fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let ss: f64 = v.map(|a| (a - mean) * (a - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Centres and scales every covariate column and the response to sample
/// mean 0 and sample standard deviation 1.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, StandardizationState)> {
    standardize_parts(ds, true, true)
}

/// Standardizes covariates and/or the response independently.
pub fn standardize_parts(ds: &Dataset, do_x: bool, do_y: bool) -> Result<(Dataset, StandardizationState)> {
    let mut state = StandardizationState::identity(ds.d());
    let mut x = ds.x().clone();
    if do_x {
        for j in 0..ds.d() {
            let (m, s) = mean_sd(ds.x().column(j).iter().copied());
            if !(s > 0.0) || s < 1e-300 {
                return Err(PptError::invalid(format!("covariate column x{} is constant", j + 1)));
            }
            x.column_mut(j).apply(|v| *v = (*v - m) / s);
            state.x_mean[j] = m;
            state.x_sd[j] = s;
        }
    }
    let mut y = ds.y().clone();
    if do_y {
        let (m, s) = mean_sd(ds.y().iter().copied());
        if !(s > 0.0) {
            return Err(PptError::invalid("response y is constant"));
        }
        y.apply(|v| *v = (*v - m) / s);
        state.y_mean = m;
        state.y_sd = s;
    }
    state.applied = do_x || do_y;
    Ok((Dataset::build(x, y, ds.groups.clone(), ds.labels.clone())?, state))
}

/// Reads a CSV with columns `x1..xd, y, z`.
///
/// With a header, columns are located by name (`x<k>` in order of `k`, `y`,
/// `z`). Without one, the last two columns are `y` and `z`.
pub fn load_dataset(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| csv_error(e, 0))?;

    let layout = if has_header {
        let header = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
        Some(header_layout(&header)?)
    } else {
        None
    };

    let mut xs: Vec<f64> = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    let mut d = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            csv_error(e, row)
        })?;
        let row = rec.position().map_or(ys.len() + 1, |p| p.line() as usize);
        let (xcols, ycol, zcol) = match &layout {
            Some(l) => l.clone(),
            None => {
                if rec.len() < 3 {
                    return Err(PptError::Parse {
                        row,
                        message: format!("expected at least 3 columns, found {}", rec.len()),
                    });
                }
                ((0..rec.len() - 2).collect(), rec.len() - 2, rec.len() - 1)
            }
        };
        if *d.get_or_insert(xcols.len()) != xcols.len() {
            return Err(PptError::Parse { row, message: "inconsistent column count".into() });
        }
        for &c in &xcols {
            xs.push(parse_field(&rec, c, row, "x")?);
        }
        ys.push(parse_field(&rec, ycol, row, "y")?);
        let zf = rec.get(zcol).ok_or_else(|| PptError::Parse { row, message: "missing z field".into() })?;
        let z: i64 = zf.parse().map_err(|_| PptError::Parse {
            row,
            message: format!("group label '{zf}' is not an integer"),
        })?;
        if z < 1 {
            return Err(PptError::Parse { row, message: "group labels must be ≥ 1".into() });
        }
        zs.push(z);
    }
    let n = ys.len();
    if n == 0 {
        return Err(PptError::Parse { row: 0, message: "empty file".into() });
    }
    let d = d.unwrap_or(0);
    let x = DMatrix::from_row_slice(n, d, &xs);
    Dataset::new(x, DVector::from_vec(ys), &zs)
}

fn csv_error(e: csv::Error, row: usize) -> PptError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PptError::Io(io),
        other => PptError::Parse { row, message: format!("{other:?}") },
    }
}

fn header_layout(header: &csv::StringRecord) -> Result<(Vec<usize>, usize, usize)> {
    let mut xcols: Vec<(usize, usize)> = Vec::new();
    let mut y = None;
    let mut z = None;
    for (i, name) in header.iter().enumerate() {
        let name = name.to_ascii_lowercase();
        match name.as_str() {
            "y" => y = Some(i),
            "z" => z = Some(i),
            _ => {
                if let Some(k) = name.strip_prefix('x').and_then(|k| k.parse::<usize>().ok()) {
                    xcols.push((k, i));
                }
            }
        }
    }
    let missing = |c: &str| PptError::Parse { row: 1, message: format!("missing column '{c}'") };
    let y = y.ok_or_else(|| missing("y"))?;
    let z = z.ok_or_else(|| missing("z"))?;
    if xcols.is_empty() {
        return Err(missing("x1"));
    }
    xcols.sort_unstable();
    Ok((xcols.into_iter().map(|(_, i)| i).collect(), y, z))
}

fn parse_field(rec: &csv::StringRecord, col: usize, row: usize, what: &str) -> Result<f64> {
    let s = rec
        .get(col)
        .ok_or_else(|| PptError::Parse { row, message: format!("missing {what} field") })?;
    if s.is_empty() {
        return Err(PptError::Parse { row, message: format!("blank {what} value") });
    }
    let v: f64 = s
        .parse()
        .map_err(|_| PptError::Parse { row, message: format!("non-numeric {what} value '{s}'") })?;
    if !v.is_finite() {
        return Err(PptError::Parse { row, message: format!("non-finite {what} value") });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_file() {
        let f = write_tmp("x1,y,z\n0.1,1.0,1\n0.2,2.0,2\n0.3,1.5,1\n0.4,0.5,2\n");
        let ds = load_dataset(f.path(), true).unwrap();
        assert_eq!((ds.n(), ds.d(), ds.n_groups()), (4, 1, 2));
        assert_eq!(ds.groups(), &[0, 1, 0, 1]);
    }

    #[test]
    fn headerless_uses_trailing_columns() {
        let f = write_tmp("0.1,0.5,1.0,3\n0.2,0.7,2.0,3\n");
        let ds = load_dataset(f.path(), false).unwrap();
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.labels(), &[3]);
    }

    #[test]
    fn rejects_zero_label() {
        let f = write_tmp("x1,y,z\n0.1,1.0,0\n0.2,2.0,1\n");
        let err = load_dataset(f.path(), true).unwrap_err().to_string();
        assert!(err.contains("group labels must be ≥ 1"), "{err}");
    }

    #[test]
    fn blank_cell_names_row() {
        let f = write_tmp("x1,y,z\n0.1,1.0,1\n0.2,,1\n");
        let err = load_dataset(f.path(), true).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn missing_column_and_empty_file() {
        let f = write_tmp("x1,y\n0.1,1.0\n");
        assert!(load_dataset(f.path(), true).unwrap_err().to_string().contains("'z'"));
        let f = write_tmp("x1,y,z\n");
        assert!(load_dataset(f.path(), true).unwrap_err().to_string().contains("empty"));
    }

    #[test]
    fn labels_are_remapped() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let ds = Dataset::new(x, DVector::from_vec(vec![1.0, 2.0, 3.0]), &[7, 2, 7]).unwrap();
        assert_eq!(ds.groups(), &[1, 0, 1]);
        assert_eq!(ds.labels(), &[2, 7]);
    }

    #[test]
    fn two_point_standardization() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let ds = Dataset::new(x, DVector::from_vec(vec![1.0, 3.0]), &[1, 1]).unwrap();
        let (s, _) = standardize(&ds).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.y()[0] + h).abs() < 1e-12 && (s.y()[1] - h).abs() < 1e-12);
        let (s2, _) = standardize(&s).unwrap();
        assert!((s2.y() - s.y()).amax() < 1e-12);
        assert!((s2.x() - s.x()).amax() < 1e-12);
    }

    #[test]
    fn constant_column_is_error() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let ds = Dataset::new(x, DVector::from_vec(vec![1.0, 2.0, 4.0]), &[1, 1, 1]).unwrap();
        assert!(standardize(&ds).unwrap_err().to_string().contains("x1"));
    }

    #[test]
    fn group_index_examples() {
        let x = DMatrix::zeros(3, 1);
        let ds = Dataset::new(x, DVector::zeros(3), &[1, 2, 1]).unwrap();
        let gi = group_index(&ds);
        assert_eq!(gi.members(0), &[0, 2]);
        assert_eq!(gi.members(1), &[1]);
        assert_eq!(gi.sizes(), vec![2, 1]);
        let ds = Dataset::new(DMatrix::zeros(2, 1), DVector::zeros(2), &[2, 1]).unwrap();
        assert_eq!(group_index(&ds).all(), &[vec![1], vec![0]]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn standardize_round_trip(vals in proptest::collection::vec(-50.0f64..50.0, 12..40), seed in 0u64..1000) {
                let n = vals.len() / 2;
                let x = DMatrix::from_fn(n, 1, |i, _| vals[i] + i as f64 * 1e-3);
                let y = DVector::from_fn(n, |i, _| vals[n + i] - i as f64 * 1e-3);
                let labels: Vec<i64> = (0..n).map(|i| 1 + ((i as u64 + seed) % 3) as i64).collect();
                let ds = Dataset::new(x, y, &labels).unwrap();
                let (s, st) = standardize(&ds).unwrap();
                let back = st.invert(&s).unwrap();
                prop_assert!((back.x() - ds.x()).amax() < 1e-10);
                prop_assert!((back.y() - ds.y()).amax() < 1e-10);
            }

            #[test]
            fn group_index_partitions(labels in proptest::collection::vec(1i64..5, 2..60)) {
                let n = labels.len();
                let ds = Dataset::new(DMatrix::zeros(n, 1), DVector::zeros(n), &labels).unwrap();
                let gi = group_index(&ds);
                let mut all: Vec<usize> = gi.all().iter().flatten().copied().collect();
                for m in gi.all() {
                    prop_assert!(m.windows(2).all(|w| w[0] < w[1]));
                }
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(gi.sizes().iter().sum::<usize>(), n);
            }
        }
    }
}
