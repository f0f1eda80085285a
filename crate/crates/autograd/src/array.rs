use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Array<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel(shape)] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn add_assign(&mut self, other: &Array<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Array<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// General axis permutation (copying).
    pub fn permute(&self, axes: &[usize]) -> Self {
        let nd = self.shape.len();
        assert_eq!(axes.len(), nd, "permute rank mismatch");
        let in_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Self { shape: out_shape, data: out };
        }
        let last = nd - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        let mut idx = vec![0usize; nd];
        let mut base = 0usize;
        loop {
            if inner_stride == 1 {
                out.extend_from_slice(&self.data[base..base + inner]);
            } else {
                let mut p = base;
                for _ in 0..inner {
                    out.push(self.data[p]);
                    p += inner_stride;
                }
            }
            // advance odometer over all but the last axis
            let mut d = last;
            loop {
                if d == 0 {
                    return Self { shape: out_shape, data: out };
                }
                d -= 1;
                idx[d] += 1;
                base += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                base -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }

    /// Sum-reduce `self` down to `shape` (numpy broadcasting rules in reverse).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let nd = self.shape.len();
        assert!(shape.len() <= nd, "cannot reduce {:?} to {shape:?}", self.shape);
        let mut target = vec![1usize; nd];
        target[nd - shape.len()..].copy_from_slice(shape);
        for (i, (&s, &t)) in self.shape.iter().zip(&target).enumerate() {
            assert!(t == s || t == 1, "cannot reduce axis {i}: {s} -> {t}");
        }
        let tstrides = strides_of(&target);
        let eff: Vec<usize> = (0..nd).map(|i| if target[i] == 1 { 0 } else { tstrides[i] }).collect();
        let mut out = vec![T::zero(); numel(&target)];
        for_each_index(&self.shape, &eff, |src, dst| out[dst] += self.data[src]);
        Self { shape: shape.to_vec(), data: out }
    }
}

/// Visit every element of a contiguous array of `shape`, yielding the flat
/// source index and the offset computed with `other_strides`.
pub(crate) fn for_each_index(shape: &[usize], other_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let nd = shape.len();
    let n = numel(shape);
    if n == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0);
        return;
    }
    let last = nd - 1;
    let inner = shape[last];
    let is = other_strides[last];
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let mut flat = 0usize;
    loop {
        let mut o = off;
        for _ in 0..inner {
            f(flat, o);
            flat += 1;
            o += is;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += other_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= other_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let a = Array::from_vec(&[2, 3], vec![0.0f64, 1., 2., 3., 4., 5.]);
        let t = a.permute(&[1, 0]);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn permute_rank3_roundtrip() {
        let a = Array::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64).collect());
        let p = a.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k][i][j] = a[i][j][k]
        assert_eq!(p.data()[1 * 6 + 1 * 3 + 2], a.data()[1 * 12 + 2 * 4 + 1]);
        assert_eq!(p.permute(&[1, 2, 0]), a);
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let a = Array::from_vec(&[2, 3], vec![1.0f64, 2., 3., 4., 5., 6.]);
        assert_eq!(a.sum_to_shape(&[3]).data(), &[5., 7., 9.]);
        assert_eq!(a.sum_to_shape(&[2, 1]).data(), &[6., 15.]);
        assert_eq!(a.sum_to_shape(&[]).data(), &[21.]);
    }
}
