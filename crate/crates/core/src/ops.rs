//! Forward kernels and their vector-Jacobian products.
//!
//! Every matrix kernel accumulates over the inner dimension in ascending
//! order, starting from zero, so results match a naive triple loop bit for
//! bit. Large products are split across rayon workers by output row; each
//! row is computed by exactly one worker, which keeps results independent of
//! the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const PAR_WORK: usize = 1 << 18;

fn shape_err(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rows_mut<T: Real>(c: &mut [T], n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if work >= PAR_WORK && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        c.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `c = a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    rows_mut(c, n, m * k * n, |i, row| {
        row.fill(T::ZERO);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    });
}

/// `c = aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    rows_mut(c, n, m * k * n, |i, row| {
        row.fill(T::ZERO);
        for p in 0..k {
            let api = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    });
}

/// `c = a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    rows_mut(c, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::ZERO;
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            *cj = s;
        }
    });
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = a.dims2();
    let n = b.shape()[1];
    let mut c = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), c.data_mut());
    Ok(c)
}

/// `aᵀ · b`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(shape_err("matmul_tn", a, b));
    }
    let (k, m) = a.dims2();
    let n = b.shape()[1];
    let mut c = Tensor::zeros(&[m, n]);
    gemm_tn(m, k, n, a.data(), b.data(), c.data_mut());
    Ok(c)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(shape_err("matmul_nt", a, b));
    }
    let (m, k) = a.dims2();
    let n = b.shape()[0];
    let mut c = Tensor::zeros(&[m, n]);
    gemm_nt(m, k, n, a.data(), b.data(), c.data_mut());
    Ok(c)
}

/// Gradients of `c = a · b`: `(dc · bᵀ, aᵀ · dc)`.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (_, k) = x.dims2();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(k) {
        softmax_in_place(row);
    }
    y
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `dx_i = y_i ⊙ (dy_i − ⟨dy_i, y_i⟩)` per row, given the softmax output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(shape_err("softmax_rows_backward", y, dy));
    }
    let (_, k) = y.dims2();
    let mut dx = Tensor::zeros(y.shape());
    for ((dx_row, y_row), dy_row) in dx
        .data_mut()
        .chunks_mut(k)
        .zip(y.data().chunks(k))
        .zip(dy.data().chunks(k))
    {
        let dot: T = y_row.iter().zip(dy_row).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dx_row.iter_mut().zip(y_row).zip(dy_row) {
            *d = yv * (g - dot);
        }
    }
    Ok(dx)
}

fn zip_same<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

/// Elementwise product. `a` may also be an `n×1` column that is broadcast
/// across the columns of an `n×d` right operand.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return zip_same("mul", a, b, |x, y| x * y);
    }
    if a.rank() == 2 && b.rank() == 2 && a.shape()[1] == 1 && a.shape()[0] == b.shape()[0] {
        let (_, d) = b.dims2();
        let mut out = b.clone();
        for (row, &s) in out.data_mut().chunks_mut(d).zip(a.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        return Ok(out);
    }
    Err(shape_err("mul", a, b))
}

/// Gradients of `c = col ⊙ m` where `col: n×1` broadcasts over `m: n×d`.
pub fn mul_col_backward<T: Real>(
    col: &Tensor<T>,
    m: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dm = mul(col, dc)?;
    let dcol = row_dot(m, dc)?;
    Ok((dcol, dm))
}

/// Per-row inner products as an `n×1` column.
pub fn row_dot<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("row_dot", a, b));
    }
    let (n, d) = a.dims2();
    let data = a
        .data()
        .chunks(d)
        .zip(b.data().chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
        .collect();
    Tensor::new(&[n, 1], data)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes `dy` where the pre-activation is strictly positive; zero at 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("relu_backward", x, dy, |v, g| if v > T::ZERO { g } else { T::ZERO })
}

/// Adds a length-`d` bias to every row of an `n×d` matrix in place.
pub fn add_row_bias<T: Real>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let (_, d) = x.dims2();
    if bias.len() != d {
        return Err(shape_err("add_row_bias", x, bias));
    }
    for row in x.data_mut().chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// Column sums of an `n×d` matrix, shaped `[d]`.
pub fn col_sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (_, d) = x.dims2();
    let mut out = vec![T::ZERO; d];
    for row in x.data().chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[d], out).expect("d > 0")
}

pub fn concat_last_dim<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Config("concat_last_dim of zero parts".into()))?;
    let n = first.dims2().0;
    if let Some(bad) = parts.iter().find(|p| p.rank() != 2 || p.shape()[0] != n) {
        return Err(shape_err("concat_last_dim", first, bad));
    }
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(&[n, total], data)
}

/// Inverse of [`concat_last_dim`]: slices columns into blocks of the given widths.
pub fn split_last_dim<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, d) = x.dims2();
    if widths.iter().sum::<usize>() != d {
        return Err(Error::Shape {
            op: "split_last_dim",
            left: x.shape().to_vec(),
            right: widths.to_vec(),
        });
    }
    let mut out: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
    for row in x.data().chunks(d) {
        let mut start = 0;
        for (buf, &w) in out.iter_mut().zip(widths) {
            buf.extend_from_slice(&row[start..start + w]);
            start += w;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(data, &w)| Tensor::new(&[n, w], data))
        .collect()
}
