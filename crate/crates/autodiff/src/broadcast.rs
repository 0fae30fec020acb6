//! Right-aligned (numpy-style) broadcasting kernels.

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed against the axes of `out`, with zero stride
/// on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for k in (0..shape.len()).rev() {
        let axis = n - shape.len() + k;
        if shape[k] != 1 {
            strides[axis] = acc;
        }
        acc *= shape[k];
    }
    strides
}

/// Visits every index of `out`, passing the flat offsets into up to two
/// broadcast operands.
fn for_each_offset(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = out.len();
    if n == 0 {
        f(0, 0);
        return;
    }
    let inner = out[n - 1];
    let (ia, ib) = (sa[n - 1], sb[n - 1]);
    let mut idx = vec![0usize; n - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        for k in 0..inner {
            f(oa + k * ia, ob + k * ib);
        }
        let mut d = n - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let total: usize = out.iter().product();
    if b.len() == 1 && a.len() == total {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 && b.len() == total {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let sa = aligned_strides(a_shape, out);
    let sb = aligned_strides(b_shape, out);
    let mut res = Vec::with_capacity(total);
    for_each_offset(out, &sa, &sb, |oa, ob| res.push(f(a[oa], b[ob])));
    res
}

pub(crate) fn broadcast_to(a: &[f64], a_shape: &[usize], out: &[usize]) -> Vec<f64> {
    let total: usize = out.iter().product();
    if a.len() == total {
        return a.to_vec();
    }
    let sa = aligned_strides(a_shape, out);
    let zeros = vec![0; out.len()];
    let mut res = Vec::with_capacity(total);
    for_each_offset(out, &sa, &zeros, |oa, _| res.push(a[oa]));
    res
}

/// Sums `a` (of shape `a_shape`) down to `target`, the adjoint of
/// [`broadcast_to`].
pub(crate) fn sum_to(a: &[f64], a_shape: &[usize], target: &[usize]) -> Vec<f64> {
    let total: usize = target.iter().product();
    if total == a.len() {
        return a.to_vec();
    }
    let st = aligned_strides(target, a_shape);
    let ones: Vec<usize> = {
        // plain row-major strides of `a` itself
        let mut s = vec![0; a_shape.len()];
        let mut acc = 1;
        for k in (0..a_shape.len()).rev() {
            s[k] = acc;
            acc *= a_shape[k];
        }
        s
    };
    let mut res = vec![0.0; total];
    for_each_offset(a_shape, &ones, &st, |oa, ot| res[ot] += a[oa]);
    res
}

/// True when `shape` broadcasts to `target` without changing `target`.
pub(crate) fn broadcasts_into(shape: &[usize], target: &[usize]) -> bool {
    shape.len() <= target.len() && broadcast_shape(shape, target).as_deref() == Some(target)
}
