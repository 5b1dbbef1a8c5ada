//! Per-slice random token masking and mask-token substitution.

use std::sync::Arc;

use rand::seq::index::sample;

use crate::autograd::{Tape, Var};
use crate::config::MaskMode;
use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;
use crate::types::{MaskSpec, TokenGrid};

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::MaskRatio(ratio))
    }
}

/// Masks exactly `round(ratio · Gh · Gw)` uniformly chosen positions in every
/// time slice, independently per slice. Depends only on `(dims, ratio, seed)`.
pub fn generate_window_mask(t: usize, gh: usize, gw: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let n = gh * gw;
    let k = (ratio * n as f64).round() as usize;
    let mut bits = vec![false; t * n];
    for s in 0..t {
        let mut rng = stream_rng(seed, stream::MASK, s as u64);
        for i in sample(&mut rng, n, k) {
            bits[s * n + i] = true;
        }
    }
    MaskSpec::from_bits([t, gh, gw], bits, seed)
}

/// Masks `round(ratio · windows)` whole `wh × ww` spatial windows per slice.
/// Windows overhanging the grid edge are clipped.
pub fn generate_window_aligned_mask(
    t: usize,
    gh: usize,
    gw: usize,
    window: (usize, usize),
    ratio: f64,
    seed: u64,
) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 {
        return Err(Error::Invalid("mask window extents must be positive".into()));
    }
    let (nh, nw) = (gh.div_ceil(wh), gw.div_ceil(ww));
    let k = (ratio * (nh * nw) as f64).round() as usize;
    let mut spec = MaskSpec::from_bits([t, gh, gw], vec![false; t * gh * gw], seed)?;
    for s in 0..t {
        let mut rng = stream_rng(seed, stream::MASK, s as u64);
        for win in sample(&mut rng, nh * nw, k) {
            let (bi, bj) = (win / nw, win % nw);
            for i in bi * wh..((bi + 1) * wh).min(gh) {
                for j in bj * ww..((bj + 1) * ww).min(gw) {
                    spec.set(s, i, j, true);
                }
            }
        }
    }
    Ok(spec)
}

/// Masks, in slice `frame`, every token whose `ph × pw` patch contains a
/// flagged pixel of the row-major `h × w` map `occ`.
pub fn occlusion_mask(dims: [usize; 3], patch: (usize, usize), width: usize, frame: usize, occ: &[bool]) -> Result<MaskSpec> {
    let [t, gh, gw] = dims;
    let (ph, pw) = patch;
    if frame >= t || occ.len() != gh * ph * width || width != gw * pw {
        return Err(Error::Shape(format!(
            "occlusion map of {} pixels (width {width}) does not cover a {gh}x{gw} grid of {ph}x{pw} patches, frame {frame} of {t}",
            occ.len()
        )));
    }
    let mut spec = MaskSpec::none(dims);
    for p in (0..occ.len()).filter(|&p| occ[p]) {
        spec.set(frame, (p / width) / ph, (p % width) / pw, true);
    }
    Ok(spec)
}

/// Dispatches on the configured [`MaskMode`].
pub fn generate_mask(
    mode: MaskMode,
    dims: [usize; 3],
    window: (usize, usize),
    ratio: f64,
    seed: u64,
) -> Result<MaskSpec> {
    let [t, gh, gw] = dims;
    match mode {
        MaskMode::Random => generate_window_mask(t, gh, gw, ratio, seed),
        MaskMode::WindowAligned => generate_window_aligned_mask(t, gh, gw, window, ratio, seed),
    }
}

fn check_dims(grid: [usize; 4], spec: &MaskSpec) -> Result<()> {
    if spec.dims() != [grid[0], grid[1], grid[2]] {
        return Err(Error::Shape(format!(
            "mask dims {:?} do not match token grid {:?}",
            spec.dims(),
            &grid[..3]
        )));
    }
    Ok(())
}

/// Records mask-token substitution on a tape.
pub fn apply_mask_var(tape: &mut Tape, grid: Var, spec: &MaskSpec, token: Var) -> Result<Var> {
    let s = tape.value(grid).shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("token grid must be rank 4, got {s:?}")));
    }
    check_dims([s[0], s[1], s[2], s[3]], spec)?;
    let c = s[3];
    let tc = tape.value(token).len();
    if tc != c {
        return Err(Error::Shape(format!("mask token has {tc} channels, grid has {c}")));
    }
    let bits: Arc<[bool]> = spec.bits().into();
    Ok(tape.mask_replace(grid, token, bits))
}

/// Replaces every masked token with `token`; shape and token count unchanged.
pub fn apply_mask(grid: &TokenGrid, spec: &MaskSpec, token: &[f64]) -> Result<TokenGrid> {
    let mut tape = Tape::inference();
    let g = tape.constant(grid.tensor().clone());
    let tok = tape.constant(Tensor::new(vec![token.len()], token.to_vec()));
    let out = apply_mask_var(&mut tape, g, spec, tok)?;
    TokenGrid::new(tape.value(out).clone())
}
