//! Lattice reshaping: 3D patch partition and embedding, 1×2×2 patch merging,
//! patch expanding, and the final expansion back to pixel resolution.
//!
//! Each rearrangement is expressed as a row-gather map so that the same code
//! path serves the forward pass and (through the scatter adjoint) the backward
//! pass.

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Pixel-row order of a `[T, H, W]` lattice after partition into
/// `(pt, ph, pw)` patches: tokens row-major, pixels inside each token
/// row-major `(t, y, x)`.
pub fn partition_index(dims: [usize; 3], patch: [usize; 3]) -> Vec<usize> {
    let [t, h, w] = dims;
    let [pt, ph, pw] = patch;
    let (gt, gh, gw) = (t / pt, h / ph, w / pw);
    let mut idx = Vec::with_capacity(t * h * w);
    for a in 0..gt {
        for i in 0..gh {
            for j in 0..gw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            idx.push(((a * pt + dt) * h + i * ph + dy) * w + j * pw + dx);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`partition_index`].
pub fn unpartition_index(dims: [usize; 3], patch: [usize; 3]) -> Vec<usize> {
    let fwd = partition_index(dims, patch);
    let mut inv = vec![0; fwd.len()];
    for (k, &p) in fwd.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Source rows for a 1×2×2 merge of a `[T, Gh, Gw]` lattice. Output token
/// `(t, i, j)` concatenates neighbours `(0,0), (0,1), (1,0), (1,1)`.
pub fn merge_index(dims: [usize; 3]) -> Vec<usize> {
    let [t, gh, gw] = dims;
    let mut idx = Vec::with_capacity(t * gh * gw);
    for a in 0..t {
        for i in 0..gh / 2 {
            for j in 0..gw / 2 {
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    idx.push((a * gh + 2 * i + di) * gw + 2 * j + dj);
                }
            }
        }
    }
    idx
}

/// Source rows for spreading each token of a `[T, Gh, Gw]` lattice into a
/// `ph × pw` block. The input is viewed as `ph·pw` sub-rows per token.
pub fn expand_index(dims: [usize; 3], ph: usize, pw: usize) -> Vec<usize> {
    let [t, gh, gw] = dims;
    let (h, w) = (gh * ph, gw * pw);
    let mut idx = Vec::with_capacity(t * h * w);
    for a in 0..t {
        for y in 0..h {
            for x in 0..w {
                let token = (a * gh + y / ph) * gw + x / pw;
                idx.push(token * ph * pw + (y % ph) * pw + x % pw);
            }
        }
    }
    idx
}

fn dims4(tape: &Tape, v: Var, what: &str) -> Result<[usize; 4]> {
    let s = tape.value(v).shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("{what}: expected rank 4, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// `[T, H, W, B]` cube → `[T/pt, H/ph, W/pw, pt·ph·pw·B]` tokens.
pub fn patch_partition(tape: &mut Tape, cube: Var, patch: [usize; 3]) -> Result<Var> {
    let [t, h, w, b] = dims4(tape, cube, "patch_partition")?;
    for (axis, size, p) in [("time", t, patch[0]), ("height", h, patch[1]), ("width", w, patch[2])] {
        if p == 0 || size % p != 0 {
            return Err(Error::Divisibility { axis, size, divisor: p });
        }
    }
    let idx: Arc<[usize]> = partition_index([t, h, w], patch).into();
    let out = vec![t / patch[0], h / patch[1], w / patch[2], patch.iter().product::<usize>() * b];
    Ok(tape.gather(cube, idx, b, out))
}

/// Inverse of [`patch_partition`] back to a `cube_shape` lattice.
pub fn patch_unpartition(tape: &mut Tape, tokens: Var, cube_shape: [usize; 4], patch: [usize; 3]) -> Result<Var> {
    let [gt, gh, gw, c] = dims4(tape, tokens, "patch_unpartition")?;
    let [t, h, w, b] = cube_shape;
    if gt * patch[0] != t || gh * patch[1] != h || gw * patch[2] != w || c != patch.iter().product::<usize>() * b {
        return Err(Error::Shape(format!(
            "tokens {:?} do not unpartition to {cube_shape:?} with patch {patch:?}",
            [gt, gh, gw, c]
        )));
    }
    let idx: Arc<[usize]> = unpartition_index([t, h, w], patch).into();
    Ok(tape.gather(tokens, idx, b, cube_shape.to_vec()))
}

/// Tokenwise affine projection into the embedding space.
pub fn linear_embed(tape: &mut Tape, grid: Var, weight: Var, bias: Var) -> Result<Var> {
    let c = dims4(tape, grid, "linear_embed")?[3];
    let rows = tape.value(weight).shape()[0];
    if c != rows {
        return Err(Error::Shape(format!("embedding expects {rows} channels, grid has {c}")));
    }
    Ok(tape.linear(grid, weight, Some(bias)))
}

/// 1×2×2 merge: `[T, Gh, Gw, C]` → `[T, Gh/2, Gw/2, 2C]`, optionally layer
/// normalizing the concatenated `4C` features before the `4C → 2C` projection.
pub fn patch_merge(tape: &mut Tape, grid: Var, norm: Option<(Var, Var)>, proj: Var) -> Result<Var> {
    let [t, gh, gw, c] = dims4(tape, grid, "patch_merge")?;
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::Shape(format!("patch_merge needs even spatial dims, got {gh}×{gw}")));
    }
    let idx: Arc<[usize]> = merge_index([t, gh, gw]).into();
    let mut x = tape.gather(grid, idx, c, vec![t, gh / 2, gw / 2, 4 * c]);
    if let Some((g, b)) = norm {
        x = tape.layer_norm(x, g, b);
    }
    let [rows, cols] = [tape.value(proj).shape()[0], tape.value(proj).shape()[1]];
    if rows != 4 * c || cols != 2 * c {
        return Err(Error::Shape(format!("merge projection {rows}×{cols}, expected {}×{}", 4 * c, 2 * c)));
    }
    Ok(tape.linear(x, proj, None))
}

/// Patch expand: `[T, Gh, Gw, C]` → `[T, 2Gh, 2Gw, C/2]` via a `C → 2C`
/// projection whose output is spread over a 2×2 block.
pub fn patch_expand(tape: &mut Tape, grid: Var, proj: Var) -> Result<Var> {
    let [t, gh, gw, c] = dims4(tape, grid, "patch_expand")?;
    if c % 2 != 0 {
        return Err(Error::Shape(format!("patch_expand needs even channels, got {c}")));
    }
    let [rows, cols] = [tape.value(proj).shape()[0], tape.value(proj).shape()[1]];
    if rows != c || cols != 2 * c {
        return Err(Error::Shape(format!("expand projection {rows}×{cols}, expected {c}×{}", 2 * c)));
    }
    let y = tape.linear(grid, proj, None);
    let idx: Arc<[usize]> = expand_index([t, gh, gw], 2, 2).into();
    Ok(tape.gather(y, idx, c / 2, vec![t, 2 * gh, 2 * gw, c / 2]))
}

/// Final expansion to pixel resolution: one `C → ph·pw·C_out` projection,
/// then each token becomes a `ph × pw` pixel block.
pub fn final_patch_expand(tape: &mut Tape, grid: Var, proj: Var, patch_hw: (usize, usize)) -> Result<Var> {
    let [t, gh, gw, c] = dims4(tape, grid, "final_patch_expand")?;
    let (ph, pw) = patch_hw;
    let [rows, cols] = [tape.value(proj).shape()[0], tape.value(proj).shape()[1]];
    if rows != c || ph * pw == 0 || cols % (ph * pw) != 0 {
        return Err(Error::Shape(format!(
            "final expand projection {rows}×{cols} incompatible with {c} channels and {ph}×{pw} blocks"
        )));
    }
    let c_out = cols / (ph * pw);
    let y = tape.linear(grid, proj, None);
    let idx: Arc<[usize]> = expand_index([t, gh, gw], ph, pw).into();
    Ok(tape.gather(y, idx, c_out, vec![t, gh * ph, gw * pw, c_out]))
}
