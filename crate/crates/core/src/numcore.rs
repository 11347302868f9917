//! Dense row-major math kernels shared by the model, attention and training code.
//!
//! Everything runs in `f64`. Summation order inside [`matmul`] is fixed
//! (left to right over the inner dimension) so repeated calls are
//! bit-identical.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix by evaluating `f(row, col)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows > 0 && row.len() != self.cols {
            return Err(Error::shape("Matrix::push_row", "width mismatch"));
        }
        if self.rows == 0 {
            self.cols = row.len();
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Column slice `[start, start + width)` of every row.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `block` into columns `[start, start + block.cols)`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        debug_assert_eq!(block.rows, self.rows);
        for r in 0..self.rows {
            let w = block.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(block.row(r));
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows == 0 {
            return Ok(other.clone());
        }
        if other.rows == 0 {
            return Ok(self.clone());
        }
        if self.cols != other.cols {
            return Err(Error::shape(
                "vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Places `self` and `other` side by side.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "hstack",
                format!("{} vs {} rows", self.rows, other.rows),
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape("add_assign", "operand shapes differ"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major boolean matrix used for attention visibility.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![fill; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Lower-triangular (causal) square mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Row-wise probabilities together with each row's log-sum-exp.
#[derive(Debug, Clone)]
pub struct SoftmaxResult {
    pub probs: Matrix,
    pub lse: Vec<f64>,
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    // i-k-j loop: each out[i][j] still accumulates over k in increasing order.
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            let brow = &b.data[kk * m..(kk + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_bt",
            format!("{}x{} * ({}x{})^T", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_at",
            format!("({}x{})^T * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &av) in ar.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable log-sum-exp of a slice. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of one row at the given temperature; writes into `out` and returns the lse.
///
/// With `temperature == 0` the result is one-hot at the argmax and the lse is
/// the max logit.
pub fn softmax_row(logits: &[f64], temperature: f64, out: &mut [f64]) -> Result<f64> {
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input"));
    }
    if temperature < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} < 0"
        )));
    }
    if logits.is_empty() {
        return Err(Error::shape("softmax", "empty row"));
    }
    if temperature == 0.0 {
        let best = argmax(logits);
        out.iter_mut().for_each(|o| *o = 0.0);
        out[best] = 1.0;
        return Ok(logits[best]);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l / temperature - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(m + sum.ln())
}

pub fn softmax_lse(logits: &Matrix, temperature: f64) -> Result<SoftmaxResult> {
    if logits.rows == 0 || logits.cols == 0 {
        return Err(Error::shape("softmax_lse", "empty input"));
    }
    let mut probs = Matrix::zeros(logits.rows, logits.cols);
    let mut lse = Vec::with_capacity(logits.rows);
    for r in 0..logits.rows {
        lse.push(softmax_row(logits.row(r), temperature, probs.row_mut(r))?);
    }
    Ok(SoftmaxResult { probs, lse })
}

pub fn rmsnorm(x: &Matrix, weight: &[f64], eps: f64) -> Result<Matrix> {
    if weight.len() != x.cols {
        return Err(Error::shape(
            "rmsnorm",
            format!("weight {} vs width {}", weight.len(), x.cols),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let denom = (ms + eps).sqrt();
        if denom == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        for (v, w) in row.iter_mut().zip(weight) {
            *v = *v / denom * w;
        }
    }
    Ok(out)
}

/// Rotary position embedding applied in place to every head of every row.
///
/// Within each head, dimension pair `(2i, 2i+1)` is rotated by
/// `pos * theta^(-2i/head_dim)`. Negative positions rotate backwards.
pub fn rope_apply_signed(x: &Matrix, positions: &[f64], head_dim: usize, theta: f64) -> Result<Matrix> {
    if head_dim == 0 || head_dim % 2 != 0 || x.cols % head_dim != 0 {
        return Err(Error::shape(
            "rope_apply",
            format!("width {} not divisible into even heads of {head_dim}", x.cols),
        ));
    }
    if positions.len() != x.rows {
        return Err(Error::shape(
            "rope_apply",
            format!("{} positions for {} rows", positions.len(), x.rows),
        ));
    }
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| theta.powf(-(2.0 * i as f64) / head_dim as f64))
        .collect();
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for head in row.chunks_mut(head_dim) {
            for (i, f) in inv_freq.iter().enumerate() {
                let (sin, cos) = (pos * f).sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

pub fn rope_apply(x: &Matrix, positions: &[usize], head_dim: usize, theta: f64) -> Result<Matrix> {
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    rope_apply_signed(x, &pos, head_dim, theta)
}

/// Mean Huber loss over all elements.
pub fn smooth_l1(a: &Matrix, b: &Matrix, beta: f64) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::shape("smooth_l1", "operand shapes differ"));
    }
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta {beta} must be > 0")));
    }
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| huber(x - y, beta))
        .sum();
    Ok(total / a.data.len() as f64)
}

#[inline]
pub(crate) fn huber(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

/// Mean over rows of `-Σ softmax(teacher) · log_softmax(student)`.
pub fn soft_cross_entropy(teacher_logits: &Matrix, student_logits: &Matrix) -> Result<f64> {
    if teacher_logits.rows != student_logits.rows || teacher_logits.cols != student_logits.cols {
        return Err(Error::shape("soft_cross_entropy", "operand shapes differ"));
    }
    if teacher_logits.rows == 0 {
        return Ok(0.0);
    }
    let teacher = softmax_lse(teacher_logits, 1.0)?;
    let mut total = 0.0;
    for r in 0..student_logits.rows {
        let srow = student_logits.row(r);
        let lse = log_sum_exp(srow);
        total -= teacher
            .probs
            .row(r)
            .iter()
            .zip(srow)
            .map(|(p, s)| if *p == 0.0 { 0.0 } else { p * (s - lse) })
            .sum::<f64>();
    }
    Ok(total / student_logits.rows as f64)
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let ones = m(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &ones).unwrap(), m(&[&[3.0], &[7.0]]));
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let z = Matrix::zeros(3, 2);
        assert_eq!(matmul(&z, &a).unwrap(), Matrix::zeros(3, 2));
        assert!(matches!(matmul(&a, &z), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 7 + c) as f64 * 0.3 - 1.0);
        let b = Matrix::from_fn(5, 4, |r, c| (r + 2 * c) as f64 * 0.1);
        let want = matmul(&a, &b.transpose()).unwrap();
        assert!(matmul_bt(&a, &b).unwrap().max_abs_diff(&want) < 1e-12);
        let c = Matrix::from_fn(3, 2, |r, c| (r as f64) - c as f64);
        let want = matmul(&a.transpose(), &c).unwrap();
        assert!(matmul_at(&a, &c).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let r = softmax_lse(&m(&[&[0.0, 0.0]]), 1.0).unwrap();
        assert!((r.probs.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((r.lse[0] - 2f64.ln()).abs() < 1e-15);

        let r = softmax_lse(&m(&[&[1.0, 2.0, 3.0]]), 0.0).unwrap();
        assert_eq!(r.probs.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(r.lse[0], 3.0);

        let r = softmax_lse(&m(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]]), 1.0).unwrap();
        for (i, want) in [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0].iter().enumerate() {
            assert!((r.probs.get(0, i) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_zero_temperature_ties_pick_lowest_index() {
        let r = softmax_lse(&m(&[&[2.0, 5.0, 5.0]]), 0.0).unwrap();
        assert_eq!(r.probs.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax_lse(&m(&[&[f64::NAN, 0.0]]), 1.0).is_err());
    }

    #[test]
    fn rmsnorm_examples() {
        let z = rmsnorm(&m(&[&[0.0, 0.0]]), &[1.0, 1.0], 1e-6).unwrap();
        assert_eq!(z.row(0), &[0.0, 0.0]);
        let r = rmsnorm(&m(&[&[3.0, 4.0]]), &[1.0, 1.0], 0.0).unwrap();
        let d = 12.5f64.sqrt();
        assert!((r.get(0, 0) - 3.0 / d).abs() < 1e-15);
        assert!((r.get(0, 1) - 4.0 / d).abs() < 1e-15);
        let w0 = rmsnorm(&m(&[&[3.0, 4.0]]), &[0.0, 0.0], 1e-6).unwrap();
        assert_eq!(w0.row(0), &[0.0, 0.0]);
        // eps = 0 with an all-zero row must not produce NaN
        let z = rmsnorm(&m(&[&[0.0, 0.0]]), &[1.0, 1.0], 0.0).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn rope_position_zero_is_identity_and_inverse_roundtrips() {
        let x = Matrix::from_fn(3, 8, |r, c| ((r * 8 + c) as f64).sin());
        assert_eq!(rope_apply(&x, &[0, 0, 0], 4, 10_000.0).unwrap(), x);

        let fwd = rope_apply(&x, &[3, 17, 250], 4, 10_000.0).unwrap();
        let back = rope_apply_signed(&fwd, &[-3.0, -17.0, -250.0], 4, 10_000.0).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-9);

        for r in 0..3 {
            for p in 0..4 {
                let n_in = x.get(r, 2 * p).hypot(x.get(r, 2 * p + 1));
                let n_out = fwd.get(r, 2 * p).hypot(fwd.get(r, 2 * p + 1));
                assert!((n_in - n_out).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rope_rejects_bad_head_dim() {
        let x = Matrix::zeros(1, 6);
        assert!(rope_apply(&x, &[0], 4, 10_000.0).is_err());
        assert!(rope_apply(&x, &[0, 1], 3, 10_000.0).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        let a = m(&[&[1.0, 2.0]]);
        assert_eq!(smooth_l1(&a, &a, 1.0).unwrap(), 0.0);
        let b = m(&[&[3.0, 4.0]]);
        assert!((smooth_l1(&a, &b, 1.0).unwrap() - 1.5).abs() < 1e-15);
        let c = m(&[&[1.5, 2.5]]);
        assert!((smooth_l1(&a, &c, 1.0).unwrap() - 0.125).abs() < 1e-15);
        assert!(smooth_l1(&a, &Matrix::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn soft_cross_entropy_examples() {
        let z = m(&[&[0.0, 0.0]]);
        assert!((soft_cross_entropy(&z, &z).unwrap() - 2f64.ln()).abs() < 1e-15);

        // saturated teacher: soft CE collapses to hard-label CE on token 1
        let teacher = m(&[&[-800.0, 800.0, -800.0]]);
        let student = m(&[&[0.3, -1.2, 2.0]]);
        let hard = -(student.get(0, 1) - log_sum_exp(student.row(0)));
        assert!((soft_cross_entropy(&teacher, &student).unwrap() - hard).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalised(row in prop::collection::vec(-50.0f64..50.0, 1..40), t in 0.05f64..4.0) {
            let x = Matrix::from_vec(1, row.len(), row.clone()).unwrap();
            let r = softmax_lse(&x, t).unwrap();
            let s: f64 = r.probs.row(0).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(r.probs.row(0).iter().all(|p| (0.0..=1.0).contains(p)));
            if t == 1.0 {
                let back: f64 = row.iter().map(|l| (l - r.lse[0]).exp()).sum();
                prop_assert!((back - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn lse_identity_at_unit_temperature(row in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let x = Matrix::from_vec(1, row.len(), row.clone()).unwrap();
            let r = softmax_lse(&x, 1.0).unwrap();
            let back: f64 = row.iter().map(|l| (l - r.lse[0]).exp()).sum();
            prop_assert!((back - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cross_entropy_bounded_by_teacher_entropy(
            pair in (1usize..12).prop_flat_map(|n| (
                prop::collection::vec(-8.0f64..8.0, n),
                prop::collection::vec(-8.0f64..8.0, n),
            ))
        ) {
            let (t, s) = pair;
            let n = t.len();
            let tm = Matrix::from_vec(1, n, t).unwrap();
            let sm = Matrix::from_vec(1, n, s).unwrap();
            let ce = soft_cross_entropy(&tm, &sm).unwrap();
            let h = entropy(softmax_lse(&tm, 1.0).unwrap().probs.row(0));
            prop_assert!(ce - h >= -1e-12);
        }

        #[test]
        fn matmul_is_deterministic_and_identity_neutral(vals in prop::collection::vec(-5.0f64..5.0, 12)) {
            let a = Matrix::from_vec(3, 4, vals).unwrap();
            let i4 = Matrix::identity(4);
            prop_assert_eq!(matmul(&a, &i4).unwrap(), a.clone());
            let b = Matrix::from_fn(4, 2, |r, c| (r as f64 + 1.0) * (c as f64 - 0.5));
            let x = matmul(&a, &b).unwrap();
            let y = matmul(&a, &b).unwrap();
            prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
