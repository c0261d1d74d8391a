//! Dense row-major 64-bit float tensors of rank 0..=2, plus the arithmetic
//! kernels behind the tape ops.
//!
//! Broadcasting follows trailing-dimension (right-aligned) rules with size-1
//! expansion, the only flavor the networks here need. Higher ranks are out of
//! scope and rejected at construction.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating rank <= 2, positive dims, and length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::Invalid(format!(
                "tensor rank {} unsupported (max 2)",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Invalid(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix from nested rows; rows must be equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("ragged matrix rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        // Every op output is scanned, so this must vectorize: an integer
        // max-reduction over the exponent bits (all-ones ⇔ Inf or NaN)
        // instead of a short-circuiting float scan.
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        let worst = self
            .data
            .iter()
            .fold(0u64, |acc, v| acc.max(v.to_bits() & EXP));
        worst != EXP
    }

    /// The single value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Invalid(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// (rows, cols) with rank-0/1 tensors padded as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.len() > 2 || shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Right-aligned broadcast result shape, or None if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Pad a shape to rank 2 (leading 1s) and return row-major strides with 0 on
/// broadcast (size-1) axes relative to `out` dims.
fn strides_for(shape: &[usize], out_r: usize, out_c: usize) -> (usize, usize) {
    let (r, c) = match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    };
    let sr = if r == 1 && out_r > 1 { 0 } else { c };
    let sc = if c == 1 && out_c > 1 { 0 } else { 1 };
    (sr, sc)
}

/// Elementwise binary op with trailing-dimension broadcasting.
pub fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let (r, c) = match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    };
    let (sar, sac) = strides_for(&a.shape, r, c);
    let (sbr, sbc) = strides_for(&b.shape, r, c);
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let abase = i * sar;
        let bbase = i * sbr;
        for j in 0..c {
            data.push(f(a.data[abase + j * sac], b.data[bbase + j * sbc]));
        }
    }
    Ok(Tensor { shape, data })
}

/// Materialize `t` broadcast to `target`.
pub fn broadcast_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    let shape = broadcast_shape(&t.shape, target).ok_or_else(|| Error::ShapeMismatch {
        op: "broadcast",
        lhs: t.shape.clone(),
        rhs: target.to_vec(),
    })?;
    if shape != target {
        return Err(Error::ShapeMismatch {
            op: "broadcast",
            lhs: t.shape.clone(),
            rhs: target.to_vec(),
        });
    }
    if t.shape == target {
        return Ok(t.clone());
    }
    let (r, c) = match target.len() {
        0 => (1, 1),
        1 => (1, target[0]),
        _ => (target[0], target[1]),
    };
    let (sr, sc) = strides_for(&t.shape, r, c);
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let base = i * sr;
        for j in 0..c {
            data.push(t.data[base + j * sc]);
        }
    }
    Tensor::new(target.to_vec(), data)
}

/// Reduce `t` to `target` by summing over axes `target` would broadcast along
/// (the adjoint of `broadcast_to`).
pub fn sum_to(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape == target {
        return Ok(t.clone());
    }
    // target must broadcast to t.shape
    match broadcast_shape(target, &t.shape) {
        Some(ref s) if s == &t.shape => {}
        _ => {
            return Err(Error::ShapeMismatch {
                op: "sum_to",
                lhs: t.shape.clone(),
                rhs: target.to_vec(),
            })
        }
    }
    let (r, c) = t.rows_cols();
    let (tr, tc) = match target.len() {
        0 => (1, 1),
        1 => (1, target[0]),
        _ => (target[0], target[1]),
    };
    let (sr, sc) = ((tr > 1) as usize, (tc > 1) as usize);
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let obase = i * sr * tc;
        let tbase = i * c;
        for j in 0..c {
            out[obase + j * sc] += t.data[tbase + j];
        }
    }
    Tensor::new(target.to_vec(), out)
}

/// Serial-position-independent sum with four accumulator lanes (fixed order,
/// so results are deterministic run to run).
pub fn sum_slice(x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = x.chunks_exact(4);
    let rem = chunks.remainder();
    for ch in chunks {
        acc[0] += ch[0];
        acc[1] += ch[1];
        acc[2] += ch[2];
        acc[3] += ch[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for &v in rem {
        s += v;
    }
    s
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let rem_a = ca.remainder();
    let cb = b.chunks_exact(4);
    let rem_b = cb.remainder();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in rem_a.iter().zip(rem_b) {
        s += x * y;
    }
    s
}

fn mat_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok((a.shape[0], a.shape[1], b.shape[0], b.shape[1]))
}

/// (m,k) @ (k,n) -> (m,n)
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, bk, n) = mat_dims("matmul", a, b)?;
    if k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// (m,k) @ (n,k)^T -> (m,n) — row-by-row dot products.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n, bk) = mat_dims("matmul_nt", a, b)?;
    if k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(dot(arow, &b.data[j * k..(j + 1) * k]));
        }
    }
    Tensor::new(vec![m, n], out)
}

/// (k,m)^T @ (k,n) -> (m,n)
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m, bk, n) = mat_dims("matmul_tn", a, b)?;
    if k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aki * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Concatenate along the last axis; leading dims must agree.
pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Invalid("concat of zero tensors".into()));
    }
    let rank = parts[0].rank().max(1);
    let rows = parts[0].rows_cols().0;
    for p in parts {
        if p.rank().max(1) != rank || p.rows_cols().0 != rows {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            let c = p.last_dim();
            data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
        }
    }
    let shape = if rank == 1 {
        vec![total]
    } else {
        vec![rows, total]
    };
    Tensor::new(shape, data)
}

/// Take `len` entries of the last axis starting at `start`.
pub fn slice_last(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = t.last_dim();
    if start + len > c || len == 0 {
        return Err(Error::Invalid(format!(
            "slice [{start}, {}) out of last-axis bound {c}",
            start + len
        )));
    }
    let (rows, _) = t.rows_cols();
    let mut data = Vec::with_capacity(rows * len);
    for i in 0..rows {
        data.extend_from_slice(&t.data[i * c + start..i * c + start + len]);
    }
    let shape = if t.rank() <= 1 {
        vec![len]
    } else {
        vec![rows, len]
    };
    Tensor::new(shape, data)
}

/// Embed `t` into zeros along the last axis, width `total`, offset `start`
/// (adjoint of `slice_last`).
pub fn pad_last(t: &Tensor, total: usize, start: usize) -> Result<Tensor> {
    let c = t.last_dim();
    if start + c > total {
        return Err(Error::Invalid(format!(
            "pad window [{start}, {}) exceeds width {total}",
            start + c
        )));
    }
    let (rows, _) = t.rows_cols();
    let mut data = vec![0.0; rows * total];
    for i in 0..rows {
        data[i * total + start..i * total + start + c]
            .copy_from_slice(&t.data[i * c..(i + 1) * c]);
    }
    let shape = if t.rank() <= 1 {
        vec![total]
    } else {
        vec![rows, total]
    };
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] @ [[1],[1]] = [[3],[7]]
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transposes() {
        let a = Tensor::matrix(&[vec![1.0, 2.0, -1.0], vec![0.5, -3.0, 4.0]]).unwrap(); // (2,3)
        let b = Tensor::matrix(&[vec![2.0, 1.0, 0.0], vec![-1.0, 3.0, 5.0]]).unwrap(); // (2,3)
        // a @ b^T
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt.shape(), &[2, 2]);
        assert_eq!(nt.data()[0], 1.0 * 2.0 + 2.0 * 1.0 + -1.0 * 0.0);
        assert_eq!(nt.data()[3], 0.5 * -1.0 + -3.0 * 3.0 + 4.0 * 5.0);
        // a^T @ b: (3,2)
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn.shape(), &[3, 3]);
        assert_eq!(tn.data()[0], 1.0 * 2.0 + 0.5 * -1.0);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            matmul(&a, &b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn broadcasting_binary_ops() {
        // (2,3) + (3,)
        let a = Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::vector(vec![10.0, 20.0, 30.0]);
        let c = binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        // (2,1) * (1,3)
        let a = Tensor::matrix(&[vec![2.0], vec![3.0]]).unwrap();
        let b = Tensor::matrix(&[vec![1.0, 10.0, 100.0]]).unwrap();
        let c = binary("mul", &a, &b, |x, y| x * y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[2.0, 20.0, 200.0, 3.0, 30.0, 300.0]);
        // scalar + vector
        let c = binary("add", &Tensor::scalar(1.0), &Tensor::vector(vec![1.0, 2.0]), |x, y| x + y)
            .unwrap();
        assert_eq!(c.shape(), &[2]);
        assert_eq!(c.data(), &[2.0, 3.0]);
        // incompatible
        assert!(binary(
            "add",
            &Tensor::vector(vec![1.0, 2.0]),
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            |x, y| x + y
        )
        .is_err());
    }

    #[test]
    fn sum_to_inverts_broadcast_axes() {
        let t = Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let cols = sum_to(&t, &[3]).unwrap();
        assert_eq!(cols.data(), &[5.0, 7.0, 9.0]);
        let rows = sum_to(&t, &[2, 1]).unwrap();
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let all = sum_to(&t, &[]).unwrap();
        assert_eq!(all.data(), &[21.0]);
        // target must be broadcast-compatible
        assert!(sum_to(&t, &[2]).is_err());
    }

    #[test]
    fn broadcast_to_materializes() {
        let b = broadcast_to(&Tensor::vector(vec![1.0, 2.0]), &[3, 2]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(broadcast_to(&Tensor::vector(vec![1.0, 2.0]), &[2, 3]).is_err());
    }

    #[test]
    fn concat_slice_pad_roundtrip() {
        let a = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::matrix(&[vec![9.0], vec![8.0]]).unwrap();
        let c = concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = slice_last(&c, 2, 1).unwrap();
        assert_eq!(s.data(), b.data());
        let p = pad_last(&s, 3, 2).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0, 9.0, 0.0, 0.0, 8.0]);
        // 1-D variant
        let v = concat_last(&[&Tensor::vector(vec![1.0]), &Tensor::vector(vec![2.0, 3.0])]).unwrap();
        assert_eq!(v.shape(), &[3]);
        assert_eq!(slice_last(&v, 1, 2).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn sum_slice_matches_naive() {
        let xs: Vec<f64> = (0..103).map(|i| (i as f64) * 0.37 - 11.0).collect();
        let naive: f64 = xs.iter().sum();
        assert!((sum_slice(&xs) - naive).abs() < 1e-9);
    }
}
