//! Small shared numeric helpers.

/// Mirror an index into `[0, n)` without repeating the edge sample
/// (reflect-101: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...).
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * n - 2;
    let mut i = i % period;
    if i < 0 {
        i += period;
    }
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Round half away from zero and clamp to the 8-bit range.
pub(crate) fn round_u8(v: f64) -> u8 {
    let r = v.round();
    if r <= 0.0 {
        0
    } else if r >= 255.0 {
        255
    } else {
        r as u8
    }
}
