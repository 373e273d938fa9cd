//! Linear forward model `y = Hx` and the vectors it acts on.
//!
//! The operator is stored dense and row-major. Every entry must be strictly
//! positive; the multiplicative solvers rely on it to keep `Hx > 0` whenever
//! the iterate has a positive component.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::io;

/// Nonnegative parameter vector, optionally carrying a `(rows, cols)` grid.
///
/// Pixel `(col, row)` lives at flat index `row * cols + col`, with row 0 at
/// the bottom of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVector {
    values: Array1<f64>,
    shape: Option<(usize, usize)>,
}

impl ImageVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "image",
                    index,
                });
            }
            if v < 0.0 {
                return Err(Error::NegativeValue {
                    what: "image",
                    index,
                    value: v,
                });
            }
        }
        Ok(ImageVector {
            values,
            shape: None,
        })
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub fn with_shape(self, rows: usize, cols: usize) -> Result<Self> {
        check_len("image shape", self.values.len(), rows * cols)?;
        Ok(ImageVector {
            shape: Some((rows, cols)),
            ..self
        })
    }

    pub fn constant(len: usize, value: f64) -> Result<Self> {
        Self::new(Array1::from_elem(len, value))
    }

    /// Skips validation; callers guarantee nonnegative finite values.
    pub(crate) fn from_trusted(values: Array1<f64>, shape: Option<(usize, usize)>) -> Self {
        debug_assert!(values.iter().all(|v| *v >= 0.0 && v.is_finite()));
        ImageVector { values, shape }
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("contiguous image")
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }

    /// Value at pixel `(col, row)`.
    pub fn pixel(&self, col: usize, row: usize) -> Result<f64> {
        let (rows, cols) = self.shape.ok_or(Error::MissingShape)?;
        if col >= cols || row >= rows {
            return Err(Error::invalid(
                "pixel",
                format!("({col}, {row}) outside {cols}x{rows} grid"),
            ));
        }
        Ok(self.values[row * cols + col])
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(Error::invalid("factor", format!("{factor} is not a nonnegative finite number")));
        }
        Ok(ImageVector::from_trusted(&self.values * factor, self.shape))
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }
}

/// Observation vector. Components may be negative (Gaussian data).
#[derive(Debug, Clone, PartialEq)]
pub struct DataVector(Array1<f64>);

impl DataVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "data", index });
        }
        Ok(DataVector(values))
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from(values))
    }

    pub(crate) fn from_trusted(values: Array1<f64>) -> Self {
        DataVector(values)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("contiguous data")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_values(self) -> Array1<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.sum()
    }

    /// Fails on the first negative component.
    pub fn ensure_nonnegative(&self) -> Result<()> {
        match self.0.iter().position(|v| *v < 0.0) {
            Some(index) => Err(Error::NegativeValue {
                what: "data",
                index,
                value: self.0[index],
            }),
            None => Ok(()),
        }
    }
}

/// Dense, strictly positive `N x M` forward operator.
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    entries: Array2<f64>,
    column_sums: Array1<f64>,
    squared_column_sums: Array1<f64>,
}

impl ForwardOperator {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (n, m) = entries.dim();
        if n == 0 || m == 0 {
            return Err(Error::invalid("entries", format!("operator must be at least 1x1, got {n}x{m}")));
        }
        let entries = entries.as_standard_layout().into_owned();
        for ((row, col), &value) in entries.indexed_iter() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::NonPositiveEntry { row, col, value });
            }
        }
        let mut op = ForwardOperator {
            entries,
            column_sums: Array1::zeros(m),
            squared_column_sums: Array1::zeros(m),
        };
        let ones = vec![1.0; n];
        let mut sums = vec![0.0; m];
        op.adjoint_into(&ones, &mut sums);
        op.column_sums = Array1::from(sums);
        let mut sq = vec![0.0; m];
        op.squared_adjoint_into(&ones, &mut sq);
        op.squared_column_sums = Array1::from(sq);
        Ok(op)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n * m);
        for row in rows {
            check_len("operator row", m, row.len())?;
            flat.extend_from_slice(row);
        }
        let entries = Array2::from_shape_vec((n, m), flat)
            .map_err(|e| Error::invalid("entries", e.to_string()))?;
        Self::new(entries)
    }

    pub fn n_data(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Cached `Hᵀ1`.
    pub fn column_sums(&self) -> &Array1<f64> {
        &self.column_sums
    }

    /// Cached `H₂ᵀ1` where `H₂` is the elementwise square of `H`.
    pub fn squared_column_sums(&self) -> &Array1<f64> {
        &self.squared_column_sums
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn apply(&self, x: &ImageVector) -> Result<DataVector> {
        check_len("image", self.n_params(), x.len())?;
        let mut out = vec![0.0; self.n_data()];
        self.forward_into(x.as_slice(), &mut out);
        Ok(DataVector::from_trusted(Array1::from(out)))
    }

    /// `Hᵀv`.
    pub fn adjoint_apply(&self, v: &DataVector) -> Result<Array1<f64>> {
        check_len("data", self.n_data(), v.len())?;
        let mut out = vec![0.0; self.n_params()];
        self.adjoint_into(v.as_slice(), &mut out);
        Ok(Array1::from(out))
    }

    /// `H₂ᵀv`, with `(H₂)ᵢⱼ = Hᵢⱼ²`.
    pub fn squared_adjoint_apply(&self, v: &DataVector) -> Result<Array1<f64>> {
        check_len("data", self.n_data(), v.len())?;
        let mut out = vec![0.0; self.n_params()];
        self.squared_adjoint_into(v.as_slice(), &mut out);
        Ok(Array1::from(out))
    }

    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let m = self.n_params();
        self.entries
            .as_slice()
            .expect("standard layout")
            .chunks_exact(m)
    }

    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_params());
        for (o, row) in out.iter_mut().zip(self.rows()) {
            *o = dot(row, x);
        }
    }

    pub(crate) fn adjoint_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n_data());
        out.fill(0.0);
        for (&vi, row) in v.iter().zip(self.rows()) {
            if vi != 0.0 {
                for (o, h) in out.iter_mut().zip(row) {
                    *o += vi * h;
                }
            }
        }
    }

    pub(crate) fn squared_adjoint_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n_data());
        out.fill(0.0);
        for (&vi, row) in v.iter().zip(self.rows()) {
            if vi != 0.0 {
                for (o, h) in out.iter_mut().zip(row) {
                    *o += vi * (h * h);
                }
            }
        }
    }

    /// Writes the operator as CSV: a header line `N,M` followed by `N`
    /// row-major lines of `M` values.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = io::csv_writer(path)?;
        w.write_record([self.n_data().to_string(), self.n_params().to_string()])?;
        for row in self.rows() {
            w.write_record(row.iter().map(|v| io::format_f64(*v)))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut records = io::csv_reader(path)?.into_records();
        let bad = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            reason,
        };
        let header = records
            .next()
            .ok_or_else(|| bad("missing N,M header".into()))??;
        if header.len() != 2 {
            return Err(bad(format!("header must be `N,M`, got {} fields", header.len())));
        }
        let n: usize = header[0].trim().parse().map_err(|_| bad("bad N".into()))?;
        let m: usize = header[1].trim().parse().map_err(|_| bad("bad M".into()))?;
        let mut flat = Vec::with_capacity(n * m);
        let mut count = 0;
        for record in records {
            let record = record?;
            if record.len() != m {
                return Err(bad(format!("row {count} has {} values, expected {m}", record.len())));
            }
            for field in record.iter() {
                flat.push(io::parse_f64(field).map_err(&bad)?);
            }
            count += 1;
        }
        if count != n {
            return Err(bad(format!("expected {n} rows, found {count}")));
        }
        let entries = Array2::from_shape_vec((n, m), flat).map_err(|e| bad(e.to_string()))?;
        Self::new(entries)
    }
}

/// Four-lane dot product with a fixed summation order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        sum += x * y;
    }
    sum
}

/// Uniform entries in `[floor, 1 + floor)`, reproducible per seed.
pub fn build_dense_positive(n: usize, m: usize, seed: u64, floor: f64) -> Result<ForwardOperator> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("dimensions", format!("{n}x{m}")));
    }
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::invalid("floor", format!("must be > 0, got {floor}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = Array2::from_shape_simple_fn((n, m), || rng.random::<f64>() + floor);
    ForwardOperator::new(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Kernel evaluated at the plain Euclidean pixel distance.
    #[default]
    Truncated,
    /// Distances wrap around the grid edges (torus).
    Periodic,
}

/// Gaussian blur surrogate for an instrument response.
///
/// Entry `(i, j)` is `gain * exp(-d²/(2 psf_sigma²)) + floor`, where `d` is the
/// distance between pixels `i` and `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurSpec {
    pub rows: usize,
    pub cols: usize,
    pub psf_sigma: f64,
    pub floor: f64,
    pub gain: f64,
    pub boundary: Boundary,
}

pub const DEFAULT_FLOOR: f64 = 1e-6;

impl BlurSpec {
    pub fn new(rows: usize, cols: usize, psf_sigma: f64) -> Self {
        BlurSpec {
            rows,
            cols,
            psf_sigma,
            floor: DEFAULT_FLOOR,
            gain: 1.0,
            boundary: Boundary::Truncated,
        }
    }

    pub fn floor(self, floor: f64) -> Self {
        BlurSpec { floor, ..self }
    }

    pub fn gain(self, gain: f64) -> Self {
        BlurSpec { gain, ..self }
    }

    pub fn boundary(self, boundary: Boundary) -> Self {
        BlurSpec { boundary, ..self }
    }

    pub fn build(&self) -> Result<ForwardOperator> {
        let BlurSpec {
            rows,
            cols,
            psf_sigma,
            floor,
            gain,
            boundary,
        } = *self;
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("dimensions", format!("{rows}x{cols} grid")));
        }
        if !(psf_sigma > 0.0 && psf_sigma.is_finite()) {
            return Err(Error::invalid("psf_sigma", format!("must be > 0, got {psf_sigma}")));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::invalid("floor", format!("must be > 0, got {floor}")));
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::invalid("gain", format!("must be > 0, got {gain}")));
        }
        let axis = |a: usize, b: usize, len: usize| -> f64 {
            let d = a.abs_diff(b);
            let d = match boundary {
                Boundary::Truncated => d,
                Boundary::Periodic => d.min(len - d),
            };
            d as f64
        };
        let m = rows * cols;
        let two_var = 2.0 * psf_sigma * psf_sigma;
        let entries = Array2::from_shape_fn((m, m), |(i, j)| {
            let (ri, ci) = (i / cols, i % cols);
            let (rj, cj) = (j / cols, j % cols);
            let dr = axis(ri, rj, rows);
            let dc = axis(ci, cj, cols);
            gain * (-(dr * dr + dc * dc) / two_var).exp() + floor
        });
        ForwardOperator::new(entries)
    }
}

/// Truncated blur with unit gain.
pub fn build_blur_operator(rows: usize, cols: usize, psf_sigma: f64, floor: f64) -> Result<ForwardOperator> {
    BlurSpec::new(rows, cols, psf_sigma).floor(floor).build()
}
