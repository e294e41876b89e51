//! Dense row-major tensors (width varies fastest) and the central-difference
//! gradient oracle used to validate every backward pass in the crate.

use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Reduction applied by [`reduce`] and [`Tensor4::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// Rank-4 tensor laid out as (batch, channel, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new_filled(dims: [usize; 4], value: f64) -> Result<Self> {
        check_dims(&dims)?;
        Ok(Self {
            dims,
            data: vec![value; dims.iter().product()],
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        Self::new_filled(dims, 0.0)
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return shape_err(format!(
                "{} values supplied for dims {:?} ({} expected)",
                data.len(),
                dims,
                expected
            ));
        }
        Ok(Self { dims, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        dims: [usize; 4],
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_dims(&dims)?;
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Ok(Self { dims, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `h × w` plane for one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!(
                "{what}: dims {:?} and {:?} differ",
                self.dims, other.dims
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_binary(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_dims(other, "map_binary")?;
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_dims(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn reduce(&self, kind: Reduction) -> f64 {
        // Construction guarantees at least one element.
        reduce(&self.data, kind).expect("tensor is never empty")
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate tensors with equal (n, h, w) along the channel axis.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.dims;
        let mut total = 0;
        for p in parts {
            let [pn, pc, ph, pw] = p.dims;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!(
                    "concat: dims {:?} incompatible with {:?}",
                    p.dims, first.dims
                ));
            }
            total += pc;
        }
        let mut out = Self::zeros([n, total, h, w])?;
        for b in 0..n {
            let mut c0 = 0;
            for p in parts {
                for c in 0..p.dims[1] {
                    out.plane_mut(b, c0 + c).copy_from_slice(p.plane(b, c));
                }
                c0 += p.dims[1];
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor4::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if sizes.iter().sum::<usize>() != self.dims[1] {
            return shape_err(format!(
                "split sizes {:?} do not sum to {} channels",
                sizes, self.dims[1]
            ));
        }
        let [n, _, h, w] = self.dims;
        let mut c0 = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            let mut part = Self::zeros([n, s, h, w])?;
            for b in 0..n {
                for c in 0..s {
                    part.plane_mut(b, c).copy_from_slice(self.plane(b, c0 + c));
                }
            }
            c0 += s;
            out.push(part);
        }
        Ok(out)
    }

    /// Select one batch item as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        if n >= self.dims[0] {
            return Err(Error::Bounds {
                index: n,
                extent: self.dims[0],
            });
        }
        let stride = self.dims[1] * self.dims[2] * self.dims[3];
        Self::from_vec(
            [1, self.dims[1], self.dims[2], self.dims[3]],
            self.data[n * stride..(n + 1) * stride].to_vec(),
        )
    }

    /// Stack `(1, c, h, w)` tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor4]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return shape_err(format!("stack: {:?} vs {:?}", t.dims, first.dims));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([n, first.dims[1], first.dims[2], first.dims[3]], data)
    }
}

/// Row-major `h × w` matrix used for depth maps, masks and loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    dims: [usize; 2],
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new_filled(dims: [usize; 2], value: f64) -> Result<Self> {
        check_dims(&dims)?;
        Ok(Self {
            dims,
            data: vec![value; dims[0] * dims[1]],
        })
    }

    pub fn from_vec(dims: [usize; 2], data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        if data.len() != dims[0] * dims[1] {
            return shape_err(format!(
                "{} values supplied for dims {:?}",
                data.len(),
                dims
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 2], f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        check_dims(&dims)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1]);
        for r in 0..dims[0] {
            for c in 0..dims[1] {
                data.push(f(r, c));
            }
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn height(&self) -> usize {
        self.dims[0]
    }

    pub fn width(&self) -> usize {
        self.dims[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.dims[1] + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dims[1]..(r + 1) * self.dims[1]]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// View as a `(1, 1, h, w)` tensor.
    pub fn to_tensor4(&self) -> Tensor4 {
        Tensor4 {
            dims: [1, 1, self.dims[0], self.dims[1]],
            data: self.data.clone(),
        }
    }

    /// Extract plane `(n, c)` of a rank-4 tensor.
    pub fn from_plane(t: &Tensor4, n: usize, c: usize) -> Self {
        Self {
            dims: [t.height(), t.width()],
            data: t.plane(n, c).to_vec(),
        }
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return shape_err(format!("dims {dims:?} contain a zero extent"));
    }
    Ok(())
}

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reduce in linear index order.
pub fn reduce(values: &[f64], kind: Reduction) -> Result<f64> {
    if values.is_empty() {
        return shape_err("reduction over an empty tensor");
    }
    Ok(match kind {
        Reduction::Sum => values.iter().sum(),
        Reduction::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Reduction::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Central-difference gradient of a scalar function, one entry at a time.
pub fn numeric_gradient<F>(f: F, x: &Tensor4, h: f64) -> Result<Tensor4>
where
    F: Fn(&Tensor4) -> f64,
{
    let indices: Vec<usize> = (0..x.len()).collect();
    let partials = numeric_partials(f, x, &indices, h)?;
    Tensor4::from_vec(x.dims, partials)
}

/// Central differences restricted to the listed linear indices.
pub fn numeric_partials<F>(f: F, x: &Tensor4, indices: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor4) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Usage(format!("step h = {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= x.len() {
            return Err(Error::Bounds {
                index: i,
                extent: x.len(),
            });
        }
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value near index {i}"
            )));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Norm-wise relative error `max|a - b| / max(max|a|, max|b|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = floor;
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: [usize; 4], v: Vec<f64>) -> Tensor4 {
        Tensor4::from_vec(dims, v).unwrap()
    }

    #[test]
    fn new_filled_shapes() {
        let z = Tensor4::new_filled([1, 1, 2, 2], 0.0).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor4::new_filled([2, 3, 4, 5], 1.5).unwrap();
        assert_eq!(c.len(), 120);
        assert!(c.data().iter().all(|&v| v == 1.5));
        assert!(matches!(
            Tensor4::new_filled([1, 1, 1, 0], 7.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn map_binary_cases() {
        let a = t([1, 1, 1, 2], vec![1.0, 2.0]);
        let b = t([1, 1, 1, 2], vec![3.0, 4.0]);
        assert_eq!(a.map_binary(&b, |x, y| x * y).unwrap().data(), &[3.0, 8.0]);
        let ones = a.map(|_| 1.0);
        assert_eq!(a.map_binary(&ones, |x, y| x * y).unwrap(), a);
        let one = t([1, 1, 1, 1], vec![1.0]);
        assert!(matches!(one.map_binary(&b, |x, _| x), Err(Error::Shape(_))));
    }

    #[test]
    fn sigmoid_saturates() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(500.0) - 1.0).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!(sigmoid(-800.0).is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-40.0..40.0);
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reductions() {
        let x = t([1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(x.reduce(Reduction::Sum), 6.0);
        assert_eq!(x.reduce(Reduction::Mean), 2.0);
        assert_eq!(reduce(&[-5.0, 2.0], Reduction::Max).unwrap(), 2.0);
        assert!(matches!(reduce(&[], Reduction::Sum), Err(Error::Shape(_))));
    }

    #[test]
    fn numeric_gradient_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor4::random_uniform([1, 2, 3, 4], -1.0, 1.0, &mut rng).unwrap();
        let g = numeric_gradient(|t| t.reduce(Reduction::Sum), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));

        let three = t([1, 1, 1, 1], vec![3.0]);
        let g = numeric_gradient(|t| t.data()[0] * t.data()[0], &three, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let g = numeric_gradient(|_| 4.2, &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        let err = numeric_gradient(|_| f64::NAN, &x, 1e-5);
        assert!(matches!(err, Err(Error::Evaluation(_))));
    }

    #[test]
    fn numeric_gradient_of_quadratic_form() {
        // f(x) = x^T A x with A symmetric has gradient 2 A x.
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let x = Tensor4::random_uniform([1, 1, 1, n], -2.0, 2.0, &mut rng).unwrap();
        let quad = |t: &Tensor4| {
            let d = t.data();
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += d[i] * a[i * n + j] * d[j];
                }
            }
            s
        };
        let analytic: Vec<f64> = (0..n)
            .map(|i| 2.0 * (0..n).map(|j| a[i * n + j] * x.data()[j]).sum::<f64>())
            .collect();
        let g = numeric_gradient(quad, &x, 1e-5).unwrap();
        assert!(relative_error(&analytic, g.data(), 1e-12) < 1e-7);
    }

    #[test]
    fn concat_then_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor4::random_uniform([2, 1, 2, 3], 0.0, 1.0, &mut rng).unwrap();
        let b = Tensor4::random_uniform([2, 3, 2, 3], 0.0, 1.0, &mut rng).unwrap();
        let cat = Tensor4::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.dims(), [2, 4, 2, 3]);
        let parts = cat.split_channels(&[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    proptest! {
        #[test]
        fn multiply_commutes_exactly(v in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = v.len();
            let a = Tensor4::from_vec([1, 1, 1, n], v.clone()).unwrap();
            let b = Tensor4::from_vec([1, 1, 1, n], v.iter().rev().copied().collect()).unwrap();
            prop_assert_eq!(a.map_binary(&b, |x, y| x * y).unwrap(), b.map_binary(&a, |x, y| x * y).unwrap());
        }

        #[test]
        fn sum_is_order_insensitive(mut v in proptest::collection::vec(-1e3f64..1e3, 1..200), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let s0 = reduce(&v, Reduction::Sum).unwrap();
            let scale = v.iter().map(|x| x.abs()).sum::<f64>().max(1e-300);
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let s1 = reduce(&v, Reduction::Sum).unwrap();
            prop_assert!((s0 - s1).abs() / scale < 1e-9);
        }
    }
}
