//! Paired datasets: the canonical CSV format, feature standardization,
//! protected-subgroup subsampling, and ingestion of tabular fairness data
//! through a column-mapping config.
//!
//! Canonical header:
//!
//! ```text
//! id,batch_id,cell_line,replicate_group[,label][,group_a][,group_b],d_0..d_{n-1},g_0..g_{m-1}
//! ```
//!
//! Floats are written in shortest round-trip form, so write → read is exact.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{Matrix, RngStream};
use crate::persist::write_atomic;

/// String ↔ index vocabulary in first-appearance order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Vocab {
    pub names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_names(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index }
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if self.index.is_empty() && !self.names.is_empty() {
            self.rebuild();
        }
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        if self.index.is_empty() {
            return self.names.iter().position(|n| n == name);
        }
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn rebuild(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
    }
}

impl Eq for Vocab {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub ids: Vec<String>,
    pub x_d: Matrix,
    pub x_g: Matrix,
    pub batch: Vec<usize>,
    pub cell_line: Vec<usize>,
    pub replicate: Vec<usize>,
    pub batch_vocab: Vocab,
    pub cell_vocab: Vocab,
    pub replicate_vocab: Vocab,
    /// Ground-truth effect id (simulation) or binary task label (fairness).
    pub labels: Option<Vec<i64>>,
    pub group_a: Option<Vec<usize>>,
    pub group_b: Option<Vec<usize>>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_batches(&self) -> usize {
        self.batch_vocab.len()
    }

    pub fn n_cell_lines(&self) -> usize {
        self.cell_vocab.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let cols = [
            ("x_d", self.x_d.rows()),
            ("x_g", self.x_g.rows()),
            ("batch_id", self.batch.len()),
            ("cell_line", self.cell_line.len()),
            ("replicate_group", self.replicate.len()),
        ];
        for (name, len) in cols {
            if len != n {
                return Err(Error::Data(format!("column {name} has {len} rows, expected {n}")));
            }
        }
        for (name, ids, vocab) in [
            ("batch_id", &self.batch, &self.batch_vocab),
            ("cell_line", &self.cell_line, &self.cell_vocab),
            ("replicate_group", &self.replicate, &self.replicate_vocab),
        ] {
            if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
                return Err(Error::Data(format!("{name} index {bad} outside vocabulary of {}", vocab.len())));
            }
        }
        for (name, col) in [("label", self.labels.as_ref().map(|v| v.len())), ("group_a", self.group_a.as_ref().map(|v| v.len())), ("group_b", self.group_b.as_ref().map(|v| v.len()))] {
            if let Some(len) = col {
                if len != n {
                    return Err(Error::Data(format!("column {name} has {len} rows, expected {n}")));
                }
            }
        }
        self.x_d.ensure_finite("x_d").map_err(|e| Error::Data(e.to_string()))?;
        self.x_g.ensure_finite("x_g").map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }

    /// Fairness mode: binary labels and at least two protected subgroups.
    pub fn validate_fairness(&self) -> Result<()> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::Data("fairness mode needs a label column".into()))?;
        if let Some(bad) = labels.iter().find(|&&l| l != 0 && l != 1) {
            return Err(Error::Data(format!("fairness label {bad} is not 0/1")));
        }
        let groups = self.subgroups()?;
        let mut present: Vec<usize> = groups.clone();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(Error::Data("fairness mode needs at least two protected subgroups".into()));
        }
        Ok(())
    }

    /// Subgroup index `2·a + b` from the two binary protected attributes.
    pub fn subgroups(&self) -> Result<Vec<usize>> {
        let (a, b) = match (&self.group_a, &self.group_b) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Data("group_a/group_b columns missing".into())),
        };
        Ok(a.iter().zip(b).map(|(&x, &y)| 2 * x.min(1) + y.min(1)).collect())
    }

    /// Rows `idx` in order; vocabularies are kept unchanged.
    pub fn subset(&self, idx: &[usize]) -> PairedDataset {
        let pick = |v: &Vec<usize>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PairedDataset {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            x_d: self.x_d.select_rows(idx),
            x_g: self.x_g.select_rows(idx),
            batch: pick(&self.batch),
            cell_line: pick(&self.cell_line),
            replicate: pick(&self.replicate),
            batch_vocab: self.batch_vocab.clone(),
            cell_vocab: self.cell_vocab.clone(),
            replicate_vocab: self.replicate_vocab.clone(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            group_a: self.group_a.as_ref().map(pick),
            group_b: self.group_b.as_ref().map(pick),
        }
    }

    /// For each row, all rows sharing its replicate group (including itself).
    pub fn replicate_members(&self) -> Vec<Vec<usize>> {
        let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &g) in self.replicate.iter().enumerate() {
            by_group.entry(g).or_default().push(i);
        }
        self.replicate.iter().map(|g| by_group[g].clone()).collect()
    }

    /// Rows grouped by cell line.
    pub fn rows_by_cell_line(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.cell_line.iter().enumerate() {
            out.entry(c).or_default().push(i);
        }
        out
    }

    // ── CSV ──

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header: Vec<String> = ["id", "batch_id", "cell_line", "replicate_group"].iter().map(|s| s.to_string()).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        if self.group_a.is_some() {
            header.push("group_a".into());
        }
        if self.group_b.is_some() {
            header.push("group_b".into());
        }
        header.extend((0..self.x_d.cols()).map(|k| format!("d_{k}")));
        header.extend((0..self.x_g.cols()).map(|k| format!("g_{k}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = vec![
                self.ids[i].clone(),
                self.batch_vocab.names[self.batch[i]].clone(),
                self.cell_vocab.names[self.cell_line[i]].clone(),
                self.replicate_vocab.names[self.replicate[i]].clone(),
            ];
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            if let Some(a) = &self.group_a {
                rec.push(a[i].to_string());
            }
            if let Some(b) = &self.group_b {
                rec.push(b[i].to_string());
            }
            rec.extend(self.x_d.row(i).iter().map(|v| format_float(*v)));
            rec.extend(self.x_g.row(i).iter().map(|v| format_float(*v)));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }
}

/// Shortest decimal representation that parses back to the same value.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn parse_float(s: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("row {row}, column {col}: '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("row {row}, column {col}: non-finite value '{s}'")));
    }
    Ok(v)
}

/// Parse a canonical paired CSV.
pub fn load_paired_csv(path: &Path) -> Result<PairedDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_paired_csv(file)
}

pub fn read_paired_csv<R: std::io::Read>(reader: R) -> Result<PairedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let required = |name: &str| find(name).ok_or_else(|| Error::Data(format!("schema error: missing column '{name}'")));
    let c_id = required("id")?;
    let c_batch = required("batch_id")?;
    let c_cell = required("cell_line")?;
    let c_rep = required("replicate_group")?;
    let c_label = find("label");
    let c_ga = find("group_a");
    let c_gb = find("group_b");
    let feature_cols = |prefix: &str| -> Result<Vec<usize>> {
        let mut cols = Vec::new();
        for k in 0.. {
            match find(&format!("{prefix}{k}")) {
                Some(c) => cols.push(c),
                None => break,
            }
        }
        let stray = header.iter().filter(|h| h.starts_with(prefix)).count();
        if stray != cols.len() {
            return Err(Error::Data(format!("schema error: {prefix}* columns are not numbered contiguously from 0")));
        }
        Ok(cols)
    };
    let d_cols = feature_cols("d_")?;
    let g_cols = feature_cols("g_")?;
    if d_cols.is_empty() || g_cols.is_empty() {
        return Err(Error::Data("schema error: need at least one d_* and one g_* column".into()));
    }

    let mut ids = Vec::new();
    let (mut batch, mut cell, mut rep) = (Vec::new(), Vec::new(), Vec::new());
    let (mut bv, mut cv, mut rv) = (Vocab::default(), Vocab::default(), Vocab::default());
    let mut labels = c_label.map(|_| Vec::new());
    let mut ga = c_ga.map(|_| Vec::new());
    let mut gb = c_gb.map(|_| Vec::new());
    let mut xd = Vec::new();
    let mut xg = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        if rec.len() != header.len() {
            return Err(Error::Data(format!("row {row}: {} fields, header has {}", rec.len(), header.len())));
        }
        ids.push(rec[c_id].to_string());
        batch.push(bv.intern(rec[c_batch].trim()));
        cell.push(cv.intern(rec[c_cell].trim()));
        rep.push(rv.intern(rec[c_rep].trim()));
        if let (Some(c), Some(v)) = (c_label, labels.as_mut()) {
            let s = rec[c].trim();
            v.push(s.parse::<i64>().map_err(|_| Error::Data(format!("row {row}, column label: '{s}' is not an integer")))?);
        }
        for (c, v, name) in [(c_ga, ga.as_mut(), "group_a"), (c_gb, gb.as_mut(), "group_b")] {
            if let (Some(c), Some(v)) = (c, v) {
                let s = rec[c].trim();
                v.push(s.parse::<usize>().map_err(|_| Error::Data(format!("row {row}, column {name}: '{s}' is not a group index")))?);
            }
        }
        for &c in &d_cols {
            xd.push(parse_float(&rec[c], row, &header[c])?);
        }
        for &c in &g_cols {
            xg.push(parse_float(&rec[c], row, &header[c])?);
        }
    }
    let n = ids.len();
    let ds = PairedDataset {
        ids,
        x_d: Matrix::new(n, d_cols.len(), xd)?,
        x_g: Matrix::new(n, g_cols.len(), xg)?,
        batch,
        cell_line: cell,
        replicate: rep,
        batch_vocab: bv,
        cell_vocab: cv,
        replicate_vocab: rv,
        labels,
        group_a: ga,
        group_b: gb,
    };
    ds.validate()?;
    Ok(ds)
}

// ── Standardization ─────────────────────────────────────────────────────────

/// Per-column mean and standard deviation fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = x.column_sums().data().iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for r in x.row_iter() {
            for (k, v) in r.iter().enumerate() {
                var[k] += (v - mean[k]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("Standardizer::transform", format!("{} vs {} columns", x.cols(), self.mean.len())));
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.mean[j]) / self.std[j]))
    }
}

// ── Subgroup subsampling ────────────────────────────────────────────────────

/// Per-subgroup sample counts for the given ratios: the largest integer
/// multiplier `m` with `ratio_i·m ≤ available_i` for every group.
pub fn subsample_counts(available: &[usize], ratios: &[usize]) -> Result<Vec<usize>> {
    if available.len() != ratios.len() || ratios.iter().any(|&r| r == 0) {
        return Err(Error::Config(format!("ratios {ratios:?} do not match {} subgroups", available.len())));
    }
    let m = available.iter().zip(ratios).map(|(&a, &r)| a / r).min().unwrap_or(0);
    Ok(ratios.iter().map(|r| r * m).collect())
}

/// Subsample the four protected subgroups, ordered `(a,b) = (0,0), (0,1),
/// (1,0), (1,1)`, to the given ratios. Selected rows keep their original order.
pub fn subsample_groups(ds: &PairedDataset, ratios: &[usize; 4], rng: &mut RngStream) -> Result<PairedDataset> {
    let groups = ds.subgroups()?;
    let mut members: [Vec<usize>; 4] = Default::default();
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    if members.iter().any(|m| m.is_empty()) {
        let sizes: Vec<usize> = members.iter().map(|m| m.len()).collect();
        return Err(Error::Data(format!("subsampling needs all four subgroups present, sizes {sizes:?}")));
    }
    let available: Vec<usize> = members.iter().map(|m| m.len()).collect();
    let counts = subsample_counts(&available, ratios)?;
    let mut chosen = Vec::new();
    for (g, (rows, &k)) in members.iter().zip(&counts).enumerate() {
        let mut stream = rng.fork(&format!("group{g}"));
        chosen.extend(stream.sample_without_replacement(rows.len(), k).into_iter().map(|j| rows[j]));
    }
    chosen.sort_unstable();
    Ok(ds.subset(&chosen))
}

// ── Tabular ingestion ───────────────────────────────────────────────────────

/// Which raw values make a column's binary attribute equal to zero/one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryColumn {
    pub column: String,
    /// Raw values mapped to 1 for labels, or to 0 (privileged) for groups.
    pub values: Vec<String>,
}

/// Column mapping for a headerless or headed delimited table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularMapping {
    pub name: String,
    /// Column names when the file has no header row.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Lines starting with this prefix are skipped.
    #[serde(default)]
    pub comment_prefix: Option<String>,
    /// Rows containing any of these values in a used column are dropped.
    #[serde(default)]
    pub na_values: Vec<String>,
    pub numeric: Vec<String>,
    pub categorical: Vec<String>,
    /// `values` lists the positive-class raw values.
    pub label: BinaryColumn,
    /// `values` lists the privileged raw values (coded 0).
    pub group_a: BinaryColumn,
    pub group_b: BinaryColumn,
    /// Also feed the protected attributes to the encoders.
    #[serde(default)]
    pub include_protected: bool,
}

fn default_delimiter() -> char {
    ','
}

/// Raw table rows after filtering.
#[derive(Debug, Clone)]
struct RawTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_raw_table(path: &Path, map: &TabularMapping) -> Result<RawTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut skip_comment = |l: &&str| map.comment_prefix.as_ref().is_none_or(|p| !l.trim_start().starts_with(p.as_str()));
    let columns = match &map.columns {
        Some(c) => c.clone(),
        None => {
            let head = lines.by_ref().find(&mut skip_comment).ok_or_else(|| Error::Data("empty table".into()))?;
            head.split(map.delimiter).map(|s| s.trim().to_string()).collect()
        }
    };
    let mut rows = Vec::new();
    for (k, line) in lines.filter(skip_comment).enumerate() {
        let fields: Vec<String> = line.split(map.delimiter).map(|s| s.trim().to_string()).collect();
        if fields.len() != columns.len() {
            return Err(Error::Data(format!("{}: line {} has {} fields, expected {}", path.display(), k + 1, fields.len(), columns.len())));
        }
        rows.push(fields);
    }
    Ok(RawTable { columns, rows })
}

/// Encoder from raw table rows to features, fitted on the training table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    pub mapping: TabularMapping,
    pub numeric_scaler: Standardizer,
    /// Category vocabulary per categorical column, from the training table.
    pub categories: Vec<Vec<String>>,
}

impl TabularEncoder {
    fn feature_columns(&self) -> (Vec<String>, Vec<String>) {
        let numeric = self.mapping.numeric.clone();
        let mut categorical = self.mapping.categorical.clone();
        if self.mapping.include_protected {
            categorical.push(self.mapping.group_a.column.clone());
            categorical.push(self.mapping.group_b.column.clone());
        }
        (numeric, categorical)
    }

    pub fn n_features(&self) -> usize {
        self.mapping.numeric.len() + self.categories.iter().map(|c| c.len()).sum::<usize>()
    }
}

fn column_index(table: &RawTable, name: &str) -> Result<usize> {
    table
        .columns
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| Error::Data(format!("schema error: missing column '{name}'")))
}

fn used_columns(map: &TabularMapping) -> Vec<String> {
    let mut used: Vec<String> = map.numeric.iter().chain(&map.categorical).cloned().collect();
    used.push(map.label.column.clone());
    used.push(map.group_a.column.clone());
    used.push(map.group_b.column.clone());
    used
}

fn drop_na(table: RawTable, map: &TabularMapping) -> Result<(RawTable, usize)> {
    let used: Vec<usize> = used_columns(map).iter().map(|c| column_index(&table, c)).collect::<Result<_>>()?;
    let before = table.rows.len();
    let rows: Vec<Vec<String>> = table
        .rows
        .into_iter()
        .filter(|r| used.iter().all(|&c| !map.na_values.iter().any(|na| na == &r[c])))
        .collect();
    let dropped = before - rows.len();
    Ok((RawTable { columns: table.columns, rows }, dropped))
}

/// Fit the encoder on the training file and encode both files.
pub fn load_tabular_pair(train: &Path, test: &Path, map: &TabularMapping) -> Result<(PairedDataset, PairedDataset, TabularEncoder)> {
    let (train_raw, dropped) = drop_na(read_raw_table(train, map)?, map)?;
    if dropped > 0 {
        warn!("{}: dropped {dropped} training rows with missing values", map.name);
    }
    let (test_raw, dropped) = drop_na(read_raw_table(test, map)?, map)?;
    if dropped > 0 {
        warn!("{}: dropped {dropped} test rows with missing values", map.name);
    }
    let mut enc = TabularEncoder {
        mapping: map.clone(),
        numeric_scaler: Standardizer { mean: vec![], std: vec![] },
        categories: vec![],
    };
    let (numeric, categorical) = enc.feature_columns();
    let numeric_raw = numeric_block(&train_raw, &numeric, "train")?;
    enc.numeric_scaler = Standardizer::fit(&numeric_raw);
    for c in &categorical {
        let idx = column_index(&train_raw, c)?;
        let mut vocab = Vocab::default();
        for r in &train_raw.rows {
            vocab.intern(&r[idx]);
        }
        enc.categories.push(vocab.names);
    }
    let train_ds = encode_table(&train_raw, &enc, "train")?;
    let test_ds = encode_table(&test_raw, &enc, "test")?;
    Ok((train_ds, test_ds, enc))
}

fn numeric_block(table: &RawTable, numeric: &[String], prefix: &str) -> Result<Matrix> {
    let idx: Vec<usize> = numeric.iter().map(|c| column_index(table, c)).collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(table.rows.len() * idx.len());
    for (r, row) in table.rows.iter().enumerate() {
        for (&c, name) in idx.iter().zip(numeric) {
            data.push(parse_float(&row[c], r + 1, &format!("{prefix}:{name}"))?);
        }
    }
    Matrix::new(table.rows.len(), idx.len(), data)
}

fn encode_table(table: &RawTable, enc: &TabularEncoder, prefix: &str) -> Result<PairedDataset> {
    let map = &enc.mapping;
    let (numeric, categorical) = enc.feature_columns();
    let num = enc.numeric_scaler.transform(&numeric_block(table, &numeric, prefix)?)?;
    let cat_idx: Vec<usize> = categorical.iter().map(|c| column_index(table, c)).collect::<Result<_>>()?;
    let n = table.rows.len();
    let width = enc.n_features();
    let mut x = Matrix::zeros(n, width);
    for (r, row) in table.rows.iter().enumerate() {
        let out = x.row_mut(r);
        out[..numeric.len()].copy_from_slice(num.row(r));
        let mut offset = numeric.len();
        for (k, &c) in cat_idx.iter().enumerate() {
            // unseen test categories encode as all zeros
            if let Some(pos) = enc.categories[k].iter().position(|v| v == &row[c]) {
                out[offset + pos] = 1.0;
            }
            offset += enc.categories[k].len();
        }
    }
    let c_label = column_index(table, &map.label.column)?;
    let c_a = column_index(table, &map.group_a.column)?;
    let c_b = column_index(table, &map.group_b.column)?;
    let labels: Vec<i64> = table.rows.iter().map(|r| i64::from(map.label.values.contains(&r[c_label]))).collect();
    let ga: Vec<usize> = table.rows.iter().map(|r| usize::from(!map.group_a.values.contains(&r[c_a]))).collect();
    let gb: Vec<usize> = table.rows.iter().map(|r| usize::from(!map.group_b.values.contains(&r[c_b]))).collect();
    let batch_vocab = Vocab::from_names(vec!["a0b0".into(), "a0b1".into(), "a1b0".into(), "a1b1".into()]);
    let batch: Vec<usize> = ga.iter().zip(&gb).map(|(&a, &b)| 2 * a + b).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("{prefix}-{i}")).collect();
    let ds = PairedDataset {
        replicate_vocab: Vocab::from_names(ids.clone()),
        replicate: (0..n).collect(),
        ids,
        x_d: x.clone(),
        x_g: x,
        batch,
        cell_line: vec![0; n],
        batch_vocab,
        cell_vocab: Vocab::from_names(vec![map.name.clone()]),
        labels: Some(labels),
        group_a: Some(ga),
        group_b: Some(gb),
    };
    ds.validate()?;
    Ok(ds)
}
