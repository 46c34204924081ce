use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{IvError, Result};

/// Aligned IV sample: responses `y`, endogenous covariates `x` (n×d),
/// instruments `z` (n×d) and optional exogenous covariates `w` (n×p).
#[derive(Debug, Clone, PartialEq)]
pub struct IVDataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub w: Option<DMatrix<f64>>,
}

impl IVDataset {
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        w: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(IvError::InsufficientSample { needed: 1, got: 0 });
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(IvError::Shape(format!(
                "row counts differ: y={n}, x={}, z={}",
                x.nrows(),
                z.nrows()
            )));
        }
        if x.ncols() != z.ncols() || x.ncols() == 0 {
            return Err(IvError::Shape(format!(
                "x has {} columns and z has {}; need equal, non-zero counts",
                x.ncols(),
                z.ncols()
            )));
        }
        if let Some(w) = &w {
            if w.nrows() != n {
                return Err(IvError::Shape(format!("w has {} rows, expected {n}", w.nrows())));
            }
        }
        Ok(Self { y, x, z, w })
    }

    /// Scalar (d = 1) dataset from slices.
    pub fn scalar(y: &[f64], x: &[f64], z: &[f64]) -> Result<Self> {
        if x.len() != y.len() || z.len() != y.len() {
            return Err(IvError::Shape("scalar columns have different lengths".into()));
        }
        Self::new(
            DVector::from_column_slice(y),
            DMatrix::from_column_slice(x.len(), 1, x),
            DMatrix::from_column_slice(z.len(), 1, z),
            None,
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.w.as_ref().map_or(0, |w| w.ncols())
    }

    /// Structural noise `εᵢ = yᵢ − ⟨xᵢ, β⟩` for a given coefficient vector.
    pub fn noise(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        if beta.len() != self.d() {
            return Err(IvError::Shape(format!(
                "coefficient vector has length {}, expected {}",
                beta.len(),
                self.d()
            )));
        }
        Ok(&self.y - &self.x * beta)
    }

    /// Read the `y, x1..xd, z1..zd[, w1..wp]` CSV schema.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let layout = ColumnLayout::from_headers(&headers)?;

        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let mut values = Vec::with_capacity(record.len());
            for (col, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    IvError::InvalidRecord(format!(
                        "row {}: column '{}' is not a number: '{field}'",
                        line + 1,
                        &headers[col]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(IvError::InvalidRecord(format!(
                        "row {}: column '{}' is not finite",
                        line + 1,
                        &headers[col]
                    )));
                }
                values.push(v);
            }
            rows.push(values);
        }
        let n = rows.len();
        if n == 0 {
            return Err(IvError::InsufficientSample { needed: 1, got: 0 });
        }
        let y = DVector::from_iterator(n, rows.iter().map(|r| r[layout.y]));
        let take = |cols: &[usize]| {
            DMatrix::from_fn(n, cols.len(), |i, j| rows[i][cols[j]])
        };
        let x = take(&layout.x);
        let z = take(&layout.z);
        let w = (!layout.w.is_empty()).then(|| take(&layout.w));
        Self::new(y, x, z, w)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.d()).map(|j| format!("x{j}")));
        header.extend((1..=self.d()).map(|j| format!("z{j}")));
        header.extend((1..=self.p()).map(|j| format!("w{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![fmt_f64(self.y[i])];
            rec.extend(self.x.row(i).iter().map(|v| fmt_f64(*v)));
            rec.extend(self.z.row(i).iter().map(|v| fmt_f64(*v)));
            if let Some(w) = &self.w {
                rec.extend(w.row(i).iter().map(|v| fmt_f64(*v)));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips exactly.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

struct ColumnLayout {
    y: usize,
    x: Vec<usize>,
    z: Vec<usize>,
    w: Vec<usize>,
}

impl ColumnLayout {
    fn from_headers(headers: &csv::StringRecord) -> Result<Self> {
        let mut y = None;
        let mut groups: [Vec<(usize, usize)>; 3] = Default::default();
        for (col, name) in headers.iter().enumerate() {
            if name == "y" {
                if y.replace(col).is_some() {
                    return Err(IvError::InvalidRecord("duplicate 'y' column".into()));
                }
                continue;
            }
            let (prefix, idx) = name.split_at(1.min(name.len()));
            let slot = match prefix {
                "x" => 0,
                "z" => 1,
                "w" => 2,
                _ => {
                    return Err(IvError::InvalidRecord(format!("unknown column '{name}'")));
                }
            };
            let idx: usize = idx
                .parse()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| IvError::InvalidRecord(format!("bad column name '{name}'")))?;
            groups[slot].push((idx, col));
        }
        let y = y.ok_or_else(|| IvError::InvalidRecord("missing 'y' column".into()))?;
        let mut ordered = Vec::with_capacity(3);
        for (slot, prefix) in groups.iter_mut().zip(["x", "z", "w"]) {
            slot.sort_unstable();
            for (k, (idx, _)) in slot.iter().enumerate() {
                if *idx != k + 1 {
                    return Err(IvError::InvalidRecord(format!(
                        "{prefix} columns must be numbered 1..{} without gaps",
                        slot.len()
                    )));
                }
            }
            ordered.push(slot.iter().map(|(_, c)| *c).collect::<Vec<_>>());
        }
        let w = ordered.pop().unwrap();
        let z = ordered.pop().unwrap();
        let x = ordered.pop().unwrap();
        if x.is_empty() || x.len() != z.len() {
            return Err(IvError::Shape(format!(
                "need matching x1..xd and z1..zd columns, found {} x and {} z",
                x.len(),
                z.len()
            )));
        }
        Ok(Self { y, x, z, w })
    }
}
