//! Associative prefix-scan formulation of the first-order recurrence.
//!
//! A step `h -> a h + b` is the pair `(a, b)`. Running step `p` and then
//! step `q` composes to `(q.a p.a, q.a p.b + q.b)` — associative with
//! identity `(1, 0)` — so the inclusive prefix of the step sequence can be
//! computed in O(log L) depth by a Blelloch up/down sweep. Since the state
//! starts at zero, `h_k` is exactly the `b` component of prefix `k`.

/// One affine step `h -> a h + b`.
pub type ScanElem = (f64, f64);

/// Neutral element of [`combine`].
pub const SCAN_IDENTITY: ScanElem = (1.0, 0.0);

/// Composition "apply `first`, then `second`".
#[inline]
pub fn combine(first: ScanElem, second: ScanElem) -> ScanElem {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// Inclusive prefixes by the plain left fold.
pub fn prefix_scan_sequential(elems: &[ScanElem]) -> Vec<ScanElem> {
    let mut acc = SCAN_IDENTITY;
    elems
        .iter()
        .map(|&e| {
            acc = combine(acc, e);
            acc
        })
        .collect()
}

/// Inclusive prefixes by the work-efficient Blelloch scan: pad to a power
/// of two, up-sweep partial products, down-sweep exclusive prefixes, then
/// fold each element back in. Operand order is preserved throughout, so
/// the non-commutative [`combine`] is safe.
pub fn prefix_scan_parallel(elems: &[ScanElem]) -> Vec<ScanElem> {
    let l = elems.len();
    if l == 0 {
        return Vec::new();
    }
    let n = l.next_power_of_two();
    let mut tree = vec![SCAN_IDENTITY; n];
    tree[..l].copy_from_slice(elems);

    let mut stride = 1;
    while stride < n {
        let step = stride * 2;
        let mut i = 0;
        while i < n {
            tree[i + step - 1] = combine(tree[i + stride - 1], tree[i + step - 1]);
            i += step;
        }
        stride = step;
    }

    tree[n - 1] = SCAN_IDENTITY;
    let mut stride = n / 2;
    while stride >= 1 {
        let step = stride * 2;
        let mut i = 0;
        while i < n {
            let left = tree[i + stride - 1];
            let incoming = tree[i + step - 1];
            tree[i + stride - 1] = incoming;
            tree[i + step - 1] = combine(incoming, left);
            i += step;
        }
        stride /= 2;
    }

    (0..l).map(|i| combine(tree[i], elems[i])).collect()
}
