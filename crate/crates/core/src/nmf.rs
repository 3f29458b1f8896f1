//! Low-rank NMF model of the per-source time-varying variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lower bound applied to every recomputed variance.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// `r_{n,f,t} = max(Σ_k b_{n,k,f} a_{n,t,k}, ε)`.
///
/// Bases are stored `[source][basis][freq]`, activations
/// `[source][frame][basis]` and variances `[source][freq][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfVarianceModel {
    bases: Vec<f64>,
    activations: Vec<f64>,
    variance: Vec<f64>,
    sources: usize,
    rank: usize,
    freqs: usize,
    frames: usize,
    floor: f64,
}

impl NmfVarianceModel {
    /// Builds a model from explicit factors.
    pub fn from_factors(
        bases: Vec<f64>,
        activations: Vec<f64>,
        sources: usize,
        rank: usize,
        freqs: usize,
        frames: usize,
    ) -> Self {
        assert_eq!(bases.len(), sources * rank * freqs);
        assert_eq!(activations.len(), sources * frames * rank);
        assert!(bases.iter().chain(&activations).all(|&v| v >= 0.0));
        let mut model = NmfVarianceModel {
            bases,
            activations,
            variance: vec![0.0; sources * freqs * frames],
            sources,
            rank,
            freqs,
            frames,
            floor: VARIANCE_FLOOR,
        };
        model.refresh();
        model
    }

    /// Bases set to one, activations uniform on `[0.1, 1)` from a seeded
    /// generator.
    pub fn init(sources: usize, rank: usize, freqs: usize, frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bases = vec![1.0; sources * rank * freqs];
        let activations = (0..sources * frames * rank)
            .map(|_| rng.random_range(0.1..1.0))
            .collect();
        Self::from_factors(bases, activations, sources, rank, freqs, frames)
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn freqs(&self) -> usize {
        self.freqs
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bases(&self) -> &[f64] {
        &self.bases
    }

    pub fn activations(&self) -> &[f64] {
        &self.activations
    }

    #[inline]
    fn b(&self, n: usize, k: usize, f: usize) -> f64 {
        self.bases[(n * self.rank + k) * self.freqs + f]
    }

    #[inline]
    fn a(&self, n: usize, t: usize, k: usize) -> f64 {
        self.activations[(n * self.frames + t) * self.rank + k]
    }

    /// Variances `[source][freq][frame]`.
    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// Variances of source `n` at bin `f`, over frames.
    pub fn source_variance(&self, n: usize, f: usize) -> &[f64] {
        let start = (n * self.freqs + f) * self.frames;
        &self.variance[start..start + self.frames]
    }

    fn refresh(&mut self) {
        for n in 0..self.sources {
            for f in 0..self.freqs {
                for t in 0..self.frames {
                    let s: f64 = (0..self.rank).map(|k| self.b(n, k, f) * self.a(n, t, k)).sum();
                    self.variance[(n * self.freqs + f) * self.frames + t] = s.max(self.floor);
                }
            }
        }
    }

    /// Multiplicative Itakura-Saito update of the bases against a power
    /// tensor `[source][freq][frame]`; variances are refreshed afterwards.
    pub fn update_bases(&mut self, power: &[f64]) {
        assert_eq!(power.len(), self.variance.len());
        let (fr, rank) = (self.frames, self.rank);
        for n in 0..self.sources {
            for f in 0..self.freqs {
                let off = (n * self.freqs + f) * fr;
                let r = &self.variance[off..off + fr];
                let p = &power[off..off + fr];
                for k in 0..rank {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for t in 0..fr {
                        let a = self.activations[(n * fr + t) * rank + k];
                        num += a * p[t] / (r[t] * r[t]);
                        den += a / r[t];
                    }
                    if den > 0.0 && den.is_finite() {
                        self.bases[(n * rank + k) * self.freqs + f] *= (num / den).sqrt();
                    }
                }
            }
        }
        self.refresh();
    }

    /// Multiplicative Itakura-Saito update of the activations; variances
    /// are refreshed afterwards.
    pub fn update_activations(&mut self, power: &[f64]) {
        assert_eq!(power.len(), self.variance.len());
        let (fr, rank, freqs) = (self.frames, self.rank, self.freqs);
        let mut num = vec![0.0; fr * rank];
        let mut den = vec![0.0; fr * rank];
        for n in 0..self.sources {
            num.iter_mut().for_each(|v| *v = 0.0);
            den.iter_mut().for_each(|v| *v = 0.0);
            for f in 0..freqs {
                let off = (n * freqs + f) * fr;
                for k in 0..rank {
                    let b = self.bases[(n * rank + k) * freqs + f];
                    for t in 0..fr {
                        let r = self.variance[off + t];
                        num[t * rank + k] += b * power[off + t] / (r * r);
                        den[t * rank + k] += b / r;
                    }
                }
            }
            for i in 0..fr * rank {
                if den[i] > 0.0 && den[i].is_finite() {
                    self.activations[n * fr * rank + i] *= (num[i] / den[i]).sqrt();
                }
            }
        }
        self.refresh();
    }

    /// One bases half-update followed by one activations half-update.
    pub fn update(&mut self, power: &[f64]) {
        self.update_bases(power);
        self.update_activations(power);
    }

    /// `Σ_{f,t} (P/r + log r)` for source `n`.
    pub fn source_cost(&self, n: usize, power: &[f64]) -> f64 {
        let len = self.freqs * self.frames;
        let r = &self.variance[n * len..(n + 1) * len];
        let p = &power[n * len..(n + 1) * len];
        r.iter().zip(p).map(|(r, p)| p / r + r.ln()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain IS divergence D(P | r) = Σ (P/r − log(P/r) − 1).
    fn is_divergence(p: &[f64], r: &[f64]) -> f64 {
        p.iter().zip(r).map(|(p, r)| p / r - (p / r).ln() - 1.0).sum()
    }

    #[test]
    fn unit_factors_sum_over_bases() {
        let m = NmfVarianceModel::from_factors(vec![1.0; 2 * 2 * 3], vec![1.0; 2 * 4 * 2], 2, 2, 3, 4);
        assert!(m.variance().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_bases_hit_the_floor() {
        let m = NmfVarianceModel::from_factors(vec![0.0; 3], vec![0.7; 4 * 1], 1, 1, 3, 4);
        assert!(m.variance().iter().all(|&v| v == VARIANCE_FLOOR));
    }

    #[test]
    fn variance_matches_triple_loop() {
        let (n, k, f, t) = (2, 2, 3, 4);
        let b: Vec<f64> = (0..n * k * f).map(|i| 0.1 + (i as f64 * 0.37).sin().abs()).collect();
        let a: Vec<f64> = (0..n * t * k).map(|i| 0.2 + (i as f64 * 0.91).cos().abs()).collect();
        let m = NmfVarianceModel::from_factors(b.clone(), a.clone(), n, k, f, t);
        for s in 0..n {
            for ff in 0..f {
                for tt in 0..t {
                    let mut r = 0.0;
                    for kk in 0..k {
                        r += b[(s * k + kk) * f + ff] * a[(s * t + tt) * k + kk];
                    }
                    let got = m.variance()[(s * f + ff) * t + tt];
                    assert!((got - r).abs() < 1e-14);
                    assert_eq!(got, m.source_variance(s, ff)[tt]);
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_in_range() {
        let m1 = NmfVarianceModel::init(2, 2, 5, 7, 42);
        let m2 = NmfVarianceModel::init(2, 2, 5, 7, 42);
        assert_eq!(m1, m2);
        assert!(m1.bases().iter().all(|&b| b == 1.0));
        assert!(m1.activations().iter().all(|&a| (0.1..1.0).contains(&a)));
        assert_ne!(m1, NmfVarianceModel::init(2, 2, 5, 7, 43));
    }

    #[test]
    fn exact_fit_is_a_fixed_point() {
        let b = vec![0.5, 2.0, 1.5];
        let a = vec![0.3, 1.1, 0.8, 2.0];
        let mut m = NmfVarianceModel::from_factors(b.clone(), a.clone(), 1, 1, 3, 4);
        let power = m.variance().to_vec();
        m.update(&power);
        for (x, y) in m.bases().iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in m.activations().iter().zip(&a) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_power_drives_variance_down_monotonically() {
        let mut m = NmfVarianceModel::init(1, 2, 4, 5, 1);
        let power = vec![0.0; 20];
        let mut prev = m.source_cost(0, &power);
        for _ in 0..5 {
            m.update(&power);
            let c = m.source_cost(0, &power);
            assert!(c <= prev);
            prev = c;
            assert!(m.bases().iter().chain(m.activations()).all(|&v| v >= 0.0));
        }
        assert!(m.variance().iter().all(|&v| v == VARIANCE_FLOOR));
    }

    #[test]
    fn divergence_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let power: Vec<f64> = (0..4 * 5).map(|_| rng.random::<f64>() * 3.0 + 0.01).collect();
        let mut m = NmfVarianceModel::init(1, 2, 4, 5, 5);
        let mut prev = is_divergence(&power, m.variance());
        for _ in 0..50 {
            m.update_bases(&power);
            let mid = is_divergence(&power, m.variance());
            assert!(mid <= prev * (1.0 + 1e-9) + 1e-12);
            m.update_activations(&power);
            let next = is_divergence(&power, m.variance());
            assert!(next <= mid * (1.0 + 1e-9) + 1e-12);
            prev = next;
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn updates_preserve_nonnegativity_and_decrease_cost(seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, k, f, t) = (2, 2, 3, 6);
            let power: Vec<f64> = (0..n * f * t).map(|_| rng.random::<f64>() * scale).collect();
            let mut m = NmfVarianceModel::init(n, k, f, t, seed);
            for _ in 0..10 {
                let before: Vec<f64> = (0..n).map(|s| m.source_cost(s, &power)).collect();
                m.update(&power);
                for s in 0..n {
                    let after = m.source_cost(s, &power);
                    proptest::prop_assert!(after <= before[s] + 1e-9 * before[s].abs());
                }
                proptest::prop_assert!(m.bases().iter().chain(m.activations()).all(|&v| v >= 0.0));
            }
        }
    }
}
