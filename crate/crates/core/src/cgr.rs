//! Cross-granularity regularization: a kernel maximum mean discrepancy
//! between the denoiser's predicted noise and the Gaussian noise actually
//! injected, evaluated separately at every pyramid level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Bandwidths of an RBF mixture `k(x, y) = Σ_s exp(-|x - y|² / (2 s²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    Fixed(Vec<f64>),
    /// Multiples of the median pairwise distance of the pooled samples,
    /// recomputed per call and treated as a constant.
    Median(Vec<f64>),
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Median(vec![0.5, 1.0, 2.0, 4.0])
    }
}

impl KernelSpec {
    pub fn num_bandwidths(&self) -> usize {
        match self {
            KernelSpec::Fixed(b) | KernelSpec::Median(b) => b.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let b = match self {
            KernelSpec::Fixed(b) | KernelSpec::Median(b) => b,
        };
        if b.is_empty() || b.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("kernel bandwidths must be positive, got {b:?}")));
        }
        Ok(())
    }

    /// Concrete bandwidths for the pooled rows of `a` and `b` (`d` columns).
    pub fn resolve(&self, a: &[f64], b: &[f64], d: usize) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            KernelSpec::Fixed(bw) => Ok(bw.clone()),
            KernelSpec::Median(mult) => {
                let med = median_pairwise_distance(a, b, d);
                let base = if med > 0.0 { med } else { 1.0 };
                Ok(mult.iter().map(|m| m * base).collect())
            }
        }
    }
}

/// Median Euclidean distance over all distinct pairs of pooled rows.
pub fn median_pairwise_distance(a: &[f64], b: &[f64], d: usize) -> f64 {
    let rows: Vec<&[f64]> = a.chunks_exact(d).chain(b.chunks_exact(d)).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    let mid = dists.len() / 2;
    // The square root is monotone, so select on squared distances.
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    m.sqrt()
}

/// Mixture-of-RBF Gram matrix on the tape.
pub fn rbf_kernel_gram(tape: &mut Tape<'_>, a: Var, b: Var, bandwidths: &[f64]) -> Result<Var> {
    let d2 = tape.sq_dist(a, b)?;
    let mut acc: Option<Var> = None;
    for &s in bandwidths {
        let scaled = tape.scale(d2, -1.0 / (2.0 * s * s));
        let k = tape.exp(scaled);
        acc = Some(match acc {
            None => k,
            Some(prev) => tape.add(prev, k)?,
        });
    }
    acc.ok_or_else(|| Error::config("kernel needs at least one bandwidth"))
}

/// Gram matrix of plain `n×d` and `m×d` tensors.
pub fn gram_matrix(a: &Tensor, b: &Tensor, spec: &KernelSpec) -> Result<Tensor> {
    let bw = spec.resolve(a.data(), b.data(), a.cols())?;
    let mut tape = Tape::inference();
    let (va, vb) = (tape.input(a), tape.input(b));
    let k = rbf_kernel_gram(&mut tape, va, vb, &bw)?;
    Ok(tape.tensor(k))
}

/// Biased (V-statistic) squared MMD between the row sets `a` and `b`:
/// `mean K(a,a) - 2 mean K(a,b) + mean K(b,b)`.
pub fn mmd2(tape: &mut Tape<'_>, a: Var, b: Var, spec: &KernelSpec) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("mmd2", format!("{sa:?} vs {sb:?}")));
    }
    if sa[0] < 2 || sb[0] < 2 {
        return Err(Error::contract(format!(
            "mmd2 needs at least two samples per set, got {} and {}",
            sa[0], sb[0]
        )));
    }
    let bw = spec.resolve(tape.value(a), tape.value(b), sa[1])?;
    let maa = tape.rbf_mean(a, a, &bw)?;
    let mab = tape.rbf_mean(a, b, &bw)?;
    let mbb = tape.rbf_mean(b, b, &bw)?;
    let within = tape.add(maa, mbb)?;
    let cross = tape.scale(mab, 2.0);
    tape.sub(within, cross)
}

/// Plain-value convenience wrapper around [`mmd2`].
pub fn mmd2_value(a: &Tensor, b: &Tensor, spec: &KernelSpec) -> Result<f64> {
    let mut tape = Tape::inference();
    let (va, vb) = (tape.input(a), tape.input(b));
    let m = mmd2(&mut tape, va, vb, spec)?;
    Ok(tape.scalar(m))
}

/// Per-level regularizer values and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityLossReport {
    /// Index 0 is the finest level.
    pub per_level: Vec<f64>,
    pub combined: f64,
    pub lambda: f64,
}

/// Tape handles for the regularizer terms.
#[derive(Clone, Debug)]
pub struct CgrTerms {
    pub per_level: Vec<Var>,
    pub combined: Var,
}

impl CgrTerms {
    pub fn report(&self, tape: &Tape<'_>, lambda: f64) -> GranularityLossReport {
        GranularityLossReport {
            per_level: self.per_level.iter().map(|&v| tape.scalar(v)).collect(),
            combined: tape.scalar(self.combined),
            lambda,
        }
    }
}

/// `lambda · Σ_level mmd2(predicted_noise_level, injected_noise_level)`.
///
/// Each entry holds the flattened masked-token noise vectors of one level as
/// rows.
pub fn cgr_loss(
    tape: &mut Tape<'_>,
    eps_hat_per_level: &[Var],
    eps_true_per_level: &[Var],
    spec: &KernelSpec,
    lambda: f64,
) -> Result<CgrTerms> {
    if eps_hat_per_level.len() != eps_true_per_level.len() {
        return Err(Error::contract(format!(
            "{} predicted levels vs {} reference levels",
            eps_hat_per_level.len(),
            eps_true_per_level.len()
        )));
    }
    if eps_hat_per_level.is_empty() {
        return Err(Error::contract("regularizer needs at least one level"));
    }
    let mut per_level = Vec::with_capacity(eps_hat_per_level.len());
    for (&hat, &truth) in eps_hat_per_level.iter().zip(eps_true_per_level) {
        per_level.push(mmd2(tape, hat, truth, spec)?);
    }
    let mut total = per_level[0];
    for &v in &per_level[1..] {
        total = tape.add(total, v)?;
    }
    let combined = tape.scale(total, lambda);
    Ok(CgrTerms {
        per_level,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn normal(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut t = rng::normal_tensor(&[n, d], &mut rng::seeded(seed));
        t.data_mut().iter_mut().for_each(|v| *v += shift);
        t
    }

    #[test]
    fn gram_diagonal_and_symmetry() {
        let spec = KernelSpec::Fixed(vec![0.5, 1.0, 2.0]);
        let a = normal(5, 3, 0.0, 1);
        let b = normal(4, 3, 0.0, 2);
        let kaa = gram_matrix(&a, &a, &spec).unwrap();
        for i in 0..5 {
            assert_eq!(kaa.at(&[i, i]), 3.0);
        }
        let kab = gram_matrix(&a, &b, &spec).unwrap();
        let kba = gram_matrix(&b, &a, &spec).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert_eq!(kab.at(&[i, j]), kba.at(&[j, i]));
                assert!(kab.at(&[i, j]) > 0.0 && kab.at(&[i, j]) <= 3.0);
            }
        }
    }

    #[test]
    fn identical_sets_and_symmetry() {
        let spec = KernelSpec::default();
        let a = normal(30, 4, 0.0, 3);
        assert!(mmd2_value(&a, &a, &spec).unwrap().abs() < 1e-12);
        let b = normal(25, 4, 0.3, 4);
        let (ab, ba) = (mmd2_value(&a, &b, &spec).unwrap(), mmd2_value(&b, &a, &spec).unwrap());
        assert!((ab - ba).abs() < 1e-14, "{ab} vs {ba}");
        assert!(mmd2_value(&normal(1, 4, 0.0, 5), &a, &spec).is_err());
    }

    #[test]
    fn cgr_gating_and_recomposition() {
        let spec = KernelSpec::default();
        let hats = [normal(6, 4, 0.2, 10), normal(5, 4, -0.1, 11)];
        let truths = [normal(6, 4, 0.0, 12), normal(5, 4, 0.0, 13)];
        let mut tape = Tape::new();
        let hv: Vec<Var> = hats.iter().map(|t| tape.input(t)).collect();
        let tv: Vec<Var> = truths.iter().map(|t| tape.input(t)).collect();

        let zero = cgr_loss(&mut tape, &hv, &tv, &spec, 0.0).unwrap();
        assert_eq!(tape.scalar(zero.combined), 0.0);

        let terms = cgr_loss(&mut tape, &hv, &tv, &spec, 0.1).unwrap();
        let report = terms.report(&tape, 0.1);
        let by_hand: f64 = hats
            .iter()
            .zip(&truths)
            .map(|(h, t)| mmd2_value(h, t, &spec).unwrap())
            .sum::<f64>()
            * 0.1;
        assert!((report.combined - by_hand).abs() < 1e-12);

        let same = cgr_loss(&mut tape, &tv, &tv, &spec, 0.1).unwrap();
        assert!(tape.scalar(same.combined).abs() < 1e-12);
        assert!(cgr_loss(&mut tape, &hv[..1], &tv, &spec, 0.1).is_err());
    }

    #[test]
    fn fused_kernel_mean_matches_gram() {
        let bw = [0.7, 1.9];
        let spec = KernelSpec::Fixed(bw.to_vec());
        let a = normal(6, 3, 0.0, 21);
        let b = normal(4, 3, 0.5, 22);
        for (x, y) in [(&a, &b), (&a, &a)] {
            let gram = gram_matrix(x, y, &spec).unwrap();
            let want = gram.data().iter().sum::<f64>() / gram.len() as f64;
            let mut tape = Tape::inference();
            let (vx, vy) = (tape.input(x), tape.input(y));
            let vy = if std::ptr::eq(x, y) { vx } else { vy };
            let m = tape.rbf_mean(vx, vy, &bw).unwrap();
            assert!((tape.scalar(m) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn fused_kernel_mean_gradient() {
        let bw = [0.7, 1.9];
        let a = normal(5, 3, 0.0, 23);
        let b = normal(4, 3, 0.5, 24);
        let f = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::inference();
            let (va, vb) = (tape.input(a), tape.input(b));
            let cross = tape.rbf_mean(va, vb, &bw).unwrap();
            let within = tape.rbf_mean(va, va, &bw).unwrap();
            tape.scalar(within) - 2.0 * tape.scalar(cross)
        };
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&a), tape.param(&b));
        let cross = tape.rbf_mean(va, vb, &bw).unwrap();
        let within = tape.rbf_mean(va, va, &bw).unwrap();
        let c2 = tape.scale(cross, 2.0);
        let loss = tape.sub(within, c2).unwrap();
        let grads = tape.backward(loss).unwrap();
        let (ga, gb) = (grads.get(va).unwrap().to_vec(), grads.get(vb).unwrap().to_vec());
        let h = 1e-6;
        for (which, g) in [(0, ga), (1, gb)] {
            for k in 0..g.len() {
                let (mut ap, mut bp, mut am, mut bm) = (a.clone(), b.clone(), a.clone(), b.clone());
                if which == 0 {
                    ap.data_mut()[k] += h;
                    am.data_mut()[k] -= h;
                } else {
                    bp.data_mut()[k] += h;
                    bm.data_mut()[k] -= h;
                }
                let fd = (f(&ap, &bp) - f(&am, &bm)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7, "{which} {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn rejects_bad_bandwidths() {
        let a = normal(3, 2, 0.0, 1);
        assert!(gram_matrix(&a, &a, &KernelSpec::Fixed(vec![0.0])).is_err());
        assert!(gram_matrix(&a, &a, &KernelSpec::Fixed(vec![])).is_err());
    }
}
