//! Row updates shared by ILRMA and ILRMA-T: iterative projection (IP) and
//! iterative source steering (ISS).
//!
//! Everything here works on a single frequency bin. The filter is the full
//! `D×D` extended matrix (for plain ILRMA, `D = N` and it is just `W_f`), the
//! observation is laid out `[component][frame]` and the outputs `[source][frame]`.

use num_complex::Complex64 as c64;

use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::model::separation_block;

const ZERO: c64 = c64::new(0.0, 0.0);

/// Denominators at or below this are treated as zero and the corresponding
/// coefficient update is skipped.
pub const DENOMINATOR_GUARD: f64 = 1e-300;

/// Mutable state of one frequency bin.
pub struct BinState<'a> {
    pub freq: usize,
    pub sources: usize,
    pub dim: usize,
    pub frames: usize,
    /// `Ṽ_f`, row-major `dim × dim`.
    pub filter: &'a mut [c64],
    /// Current outputs, `[source][frame]`.
    pub outputs: &'a mut [c64],
    /// Stacked observation, `[component][frame]`.
    pub obs: &'a [c64],
}

impl BinState<'_> {
    pub fn row(&self, r: usize) -> &[c64] {
        &self.filter[r * self.dim..(r + 1) * self.dim]
    }

    pub fn output(&self, n: usize) -> &[c64] {
        &self.outputs[n * self.frames..(n + 1) * self.frames]
    }

    pub fn component(&self, d: usize) -> &[c64] {
        &self.obs[d * self.frames..(d + 1) * self.frames]
    }

    /// Recomputes output `n` from its filter row.
    pub fn refresh_output(&mut self, n: usize) {
        let (dim, frames) = (self.dim, self.frames);
        let y = &mut self.outputs[n * frames..(n + 1) * frames];
        y.iter_mut().for_each(|v| *v = ZERO);
        for d in 0..dim {
            let c = self.filter[n * dim + d];
            if c == ZERO {
                continue;
            }
            for (v, x) in y.iter_mut().zip(&self.obs[d * frames..(d + 1) * frames]) {
                *v += c * x;
            }
        }
    }
}

/// `G = (1/T) Σ_t v_t v_tᴴ / r_t` for a `[component][frame]` observation.
pub fn weighted_cov(obs: &[c64], dim: usize, frames: usize, r: &[f64]) -> Vec<c64> {
    assert_eq!(obs.len(), dim * frames);
    assert_eq!(r.len(), frames);
    let inv_t = 1.0 / frames as f64;
    let weighted: Vec<c64> = obs
        .chunks_exact(frames)
        .flat_map(|comp| comp.iter().zip(r).map(|(x, r)| x / r))
        .collect();
    let mut g = vec![ZERO; dim * dim];
    for i in 0..dim {
        let xi = &weighted[i * frames..(i + 1) * frames];
        for j in 0..=i {
            let xj = &obs[j * frames..(j + 1) * frames];
            let s: c64 = xi.iter().zip(xj).map(|(a, b)| a * b.conj()).sum();
            let s = s * inv_t;
            g[i * dim + j] = s;
            g[j * dim + i] = s.conj();
        }
        g[i * dim + i].im = 0.0;
    }
    g
}

/// Iterative-projection update of row `n`:
/// `p̃_n ← G⁻¹a / sqrt(aᴴG⁻¹a)` with `a = [W⁻¹e_n; 0]`, written back as the
/// row `p̃_nᴴ`. Uses two solves (one against `W`, one against `G`) and
/// refreshes output `n`.
pub fn ip_update_row(bin: &mut BinState<'_>, g: &[c64], n: usize, solves: &mut u64) -> Result<()> {
    let (ns, dim) = (bin.sources, bin.dim);
    let w = separation_block(bin.filter, ns, dim);
    let lu = Lu::new(&w, ns).ok_or(Error::Singular {
        freq: bin.freq,
        what: "separation matrix",
    })?;
    let mut e = vec![ZERO; ns];
    e[n] = c64::new(1.0, 0.0);
    let head = lu.solve(&e);
    *solves += 1;

    let mut a = vec![ZERO; dim];
    a[..ns].copy_from_slice(&head);
    let mut u = a.clone();
    let mut scratch = g.to_vec();
    linalg::solve_hermitian_loaded(&mut scratch, dim, &mut u).ok_or(Error::Singular {
        freq: bin.freq,
        what: "weighted covariance",
    })?;
    *solves += 1;

    let quad: f64 = a.iter().zip(&u).map(|(a, u)| a.conj() * u).sum::<c64>().re;
    if !(quad > 0.0) || !quad.is_finite() {
        return Err(Error::Singular {
            freq: bin.freq,
            what: "weighted covariance",
        });
    }
    let scale = 1.0 / quad.sqrt();
    for (d, ud) in u.iter().enumerate() {
        bin.filter[n * dim + d] = ud.conj() * scale;
    }
    bin.refresh_output(n);
    Ok(())
}

/// `uᴴ G u` (real part).
pub fn quadratic_form(g: &[c64], dim: usize, u: &[c64]) -> f64 {
    let mut s = ZERO;
    for i in 0..dim {
        let gu: c64 = (0..dim).map(|j| g[i * dim + j] * u[j]).sum();
        s += u[i].conj() * gu;
    }
    s.re
}

/// ISS coefficients `v_{m,n}` for steering source `n`, computed from the
/// current outputs (`[source][frame]`) and per-source variances.
pub fn iss_coefficients(outputs: &[c64], frames: usize, r: &[&[f64]], n: usize) -> Vec<Option<c64>> {
    let sources = r.len();
    let yn = &outputs[n * frames..(n + 1) * frames];
    (0..sources)
        .map(|m| {
            let rm = r[m];
            let den: f64 = yn.iter().zip(rm).map(|(y, r)| y.norm_sqr() / r).sum();
            if m == n {
                let power = den / frames as f64;
                if power > DENOMINATOR_GUARD && power.is_finite() {
                    Some(c64::new(1.0 - power.sqrt().recip(), 0.0))
                } else {
                    None
                }
            } else {
                if !(den > DENOMINATOR_GUARD) || !den.is_finite() {
                    return None;
                }
                let ym = &outputs[m * frames..(m + 1) * frames];
                let num: c64 = ym
                    .iter()
                    .zip(yn)
                    .zip(rm)
                    .map(|((a, b), r)| a * b.conj() / r)
                    .sum();
                Some(num / den)
            }
        })
        .collect()
}

/// Rank-one ISS update steering source `n`:
/// `Ṽ ← Ṽ − [v_{1,n} … v_{N,n} 0 … 0]ᵀ p̃_nᴴ`, with outputs maintained
/// incrementally. No matrix solves.
pub fn iss_update_source(bin: &mut BinState<'_>, r: &[&[f64]], n: usize) {
    let (ns, dim, frames) = (bin.sources, bin.dim, bin.frames);
    let coefs = iss_coefficients(bin.outputs, frames, r, n);
    let row_n: Vec<c64> = bin.row(n).to_vec();
    let y_n: Vec<c64> = bin.output(n).to_vec();
    for (m, v) in coefs.iter().enumerate().take(ns) {
        let Some(v) = *v else { continue };
        if m == n {
            let keep = 1.0 - v;
            bin.filter[n * dim..(n + 1) * dim].iter_mut().for_each(|p| *p *= keep);
            bin.outputs[n * frames..(n + 1) * frames].iter_mut().for_each(|y| *y *= keep);
        } else {
            for (p, q) in bin.filter[m * dim..(m + 1) * dim].iter_mut().zip(&row_n) {
                *p -= v * q;
            }
            for (y, q) in bin.outputs[m * frames..(m + 1) * frames].iter_mut().zip(&y_n) {
                *y -= v * q;
            }
        }
    }
}

/// One IP sweep over sources `0..N` for one bin. The weighted covariances
/// use the full extended observation.
pub fn ip_sweep(bin: &mut BinState<'_>, r: &[&[f64]], solves: &mut u64) -> Result<()> {
    for n in 0..bin.sources {
        let g = weighted_cov(bin.obs, bin.dim, bin.frames, r[n]);
        ip_update_row(bin, &g, n, solves)?;
    }
    Ok(())
}

/// One ISS sweep over sources `0..N` for one bin.
pub fn iss_sweep(bin: &mut BinState<'_>, r: &[&[f64]]) {
    for n in 0..bin.sources {
        iss_update_source(bin, r, n);
    }
}
