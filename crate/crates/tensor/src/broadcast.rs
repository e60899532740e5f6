use crate::tensor::numel;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Calls `f(out_index, src_offset)` for every element of `dst`, where
/// `src_offset` is the element of the broadcast source `src` it reads.
pub(crate) fn for_each_offset(src: &[usize], dst: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(dst);
    let src_len = numel(src);
    if src == dst {
        (0..total).for_each(|i| f(i, i));
        return;
    }
    if src_len == 1 {
        (0..total).for_each(|i| f(i, 0));
        return;
    }
    let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
    if dst.ends_with(&trimmed) {
        (0..total).for_each(|i| f(i, i % src_len));
        return;
    }
    let rank = dst.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let axis = rank - src.len() + i;
        strides[axis] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..total {
        f(i, off);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            off += strides[axis];
            if index[axis] < dst[axis] {
                break;
            }
            off -= strides[axis] * index[axis];
            index[axis] = 0;
        }
    }
}
