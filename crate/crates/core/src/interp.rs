/// One output sample of a 1D linear resampling: `lo`/`hi` source indices and
/// the weight `frac` given to `hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centred ("align corners = false") source coordinates for
/// resampling `in_len` samples onto `out_len`, clamped at both borders.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Nearest source index under the same half-pixel convention.
pub(crate) fn nearest_index(in_len: usize, out_len: usize, i: usize) -> usize {
    let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}
