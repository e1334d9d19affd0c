//! Row-major shape arithmetic shared by the forward and backward kernels.

pub fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` when viewed with shape `target` (broadcast dims get stride 0).
pub fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let off = target.len() - src.len();
    (0..target.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// For every element of `dims` in row-major order, the offset obtained with `view_strides`.
pub fn map_offsets(dims: &[usize], view_strides: &[usize]) -> Vec<usize> {
    let n = numel(dims);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if dims.is_empty() {
        out.push(0);
        return out;
    }
    let rank = dims.len();
    let last = dims[rank - 1];
    let last_stride = view_strides[rank - 1];
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..last {
            out.push(base + j * last_stride);
        }
        // carry into the outer dims
        let mut k = rank - 1;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            counter[k] += 1;
            base += view_strides[k];
            if counter[k] < dims[k] {
                break;
            }
            base -= view_strides[k] * dims[k];
            counter[k] = 0;
        }
    }
}

/// Dims after reducing `axes` (kept as size 1).
pub fn reduced_dims(dims: &[usize], axes: &[usize]) -> Vec<usize> {
    dims.iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// Splits `dims` around `axis` into (outer, axis extent, inner).
pub fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&dims[..axis]),
        dims[axis],
        numel(&dims[axis + 1..]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[3, 1, 4], &[5, 1]), Some(vec![3, 5, 4]));
        assert_eq!(broadcast_shapes(&[2], &[3]), None);
        assert_eq!(broadcast_shapes(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn offsets_follow_broadcast_strides() {
        let s = broadcast_strides(&[2, 1], &[2, 3]);
        assert_eq!(map_offsets(&[2, 3], &s), vec![0, 0, 0, 1, 1, 1]);
        let s = broadcast_strides(&[3], &[2, 3]);
        assert_eq!(map_offsets(&[2, 3], &s), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(map_offsets(&[], &[]), vec![0]);
    }
}
