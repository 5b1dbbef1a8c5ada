//! Binary portable-pixmap (P6) triptychs of original, masked, and
//! reconstructed frames.

use std::io::{Result, Write};

use satswin::types::{MaskSpec, TimeCube};

/// Gray shown in place of masked patches.
const MASK_GRAY: f32 = 0.5;
/// White separator between panels, in pixels.
const GAP: usize = 2;

/// Copy of `cube` with every masked patch painted gray.
pub fn masked_view(cube: &TimeCube, mask: &MaskSpec, patch: [usize; 3]) -> TimeCube {
    let mut out = cube.clone();
    let [t, h, w, b] = cube.shape();
    let [pt, ph, pw] = patch;
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                if mask.is_masked(f / pt, y / ph, x / pw) {
                    let i = out.index(f, y, x, 0);
                    out.data_mut()[i..i + b].fill(MASK_GRAY);
                }
            }
        }
    }
    out
}

/// Side-by-side RGB rendering of frame `t` of every cube in `panels`.
pub fn write_triptych(out: &mut impl Write, panels: &[&TimeCube], t: usize, rgb: [usize; 3]) -> Result<()> {
    let [_, h, w, _] = panels[0].shape();
    let width = panels.len() * w + (panels.len() - 1) * GAP;
    write!(out, "P6\n{width} {h}\n255\n")?;
    let mut row = Vec::with_capacity(width * 3);
    for y in 0..h {
        row.clear();
        for (i, cube) in panels.iter().enumerate() {
            if i > 0 {
                row.extend(std::iter::repeat_n(255u8, GAP * 3));
            }
            for x in 0..w {
                row.extend(rgb.map(|k| (cube.get(t, y, x, k).clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}
