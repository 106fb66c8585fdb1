//! Representational similarity: mean canonical correlation (CCA), linear
//! CKA, and per-layer weight distances.
//!
//! Conv activations are compared per channel: a [N,C,H,W] activation is
//! flattened so every spatial position of every example is one observation,
//! giving a [N*H*W, C] matrix. Both measures need more observations than
//! dimensions; inputs violating that are refused rather than silently
//! regularized into meaninglessness.

use crate::error::{Error, Result};
use crate::linalg::{svd, sym_inv_sqrt};
use crate::model::ActivationDump;
use crate::params::ParamSet;
use crate::recordio;
use crate::tensor::Tensor;
use std::path::Path;

/// Ridge added to covariance diagonals before whitening.
pub const CCA_RIDGE: f64 = 1e-6;

/// Observation matrix for a named layer: conv [N,C,H,W] becomes [N*H*W, C],
/// rank-2 activations pass through.
pub fn layer_observations(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        2 => Ok(t.clone()),
        4 => {
            let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
            let mut out = Tensor::zeros(vec![n * h * w, c]);
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let v = t.data()[((i * c + ch) * h + y) * w + x];
                            out.set2((i * h + y) * w + x, ch, v);
                        }
                    }
                }
            }
            Ok(out)
        }
        _ => Err(Error::ShapeMismatch {
            op: "layer_observations",
            detail: format!("expected rank 2 or 4, got {:?}", t.shape()),
        }),
    }
}

/// Subtract column means.
fn center_columns(x: &Tensor) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut means = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            means[j] += x.at2(i, j);
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut out = x.clone();
    for i in 0..n {
        for j in 0..d {
            out.set2(i, j, x.at2(i, j) - means[j]);
        }
    }
    out
}

/// a^T b / (n - 1) for centered matrices with n rows.
fn cov(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.shape()[0] as f64;
    Ok(a.transposed()?.matmul(b)?.scale(1.0 / (n - 1.0)))
}

fn check_obs(x: &Tensor, y: &Tensor, op: &'static str) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
        });
    }
    let n = x.shape()[0];
    let d = x.shape()[1].max(y.shape()[1]);
    if n <= d {
        return Err(Error::Degenerate(format!(
            "{op}: {n} observations for {d} dimensions; need more rows than columns"
        )));
    }
    Ok(())
}

/// Mean canonical correlation between the column spaces of x and y
/// (observations in rows). Values lie in [0, 1].
pub fn cca_similarity(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_obs(x, y, "cca_similarity")?;
    let xc = center_columns(x);
    let yc = center_columns(y);
    let mut sxx = cov(&xc, &xc)?;
    let mut syy = cov(&yc, &yc)?;
    let sxy = cov(&xc, &yc)?;
    for i in 0..sxx.shape()[0] {
        let v = sxx.at2(i, i);
        sxx.set2(i, i, v + CCA_RIDGE);
    }
    for i in 0..syy.shape()[0] {
        let v = syy.at2(i, i);
        syy.set2(i, i, v + CCA_RIDGE);
    }
    let ix = sym_inv_sqrt(&sxx)?;
    let iy = sym_inv_sqrt(&syy)?;
    let t = ix.matmul(&sxy)?.matmul(&iy)?;
    let (_, s, _) = svd(&t)?;
    let k = x.shape()[1].min(y.shape()[1]);
    let mean = s.iter().take(k).map(|&v| v.clamp(0.0, 1.0)).sum::<f64>() / k as f64;
    Ok(mean)
}

/// Linear CKA between observation matrices (rows are observations).
pub fn cka_similarity(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_obs(x, y, "cka_similarity")?;
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross = yc.transposed()?.matmul(&xc)?.frobenius_norm();
    let xx = xc.transposed()?.matmul(&xc)?.frobenius_norm();
    let yy = yc.transposed()?.matmul(&yc)?.frobenius_norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Degenerate("cka_similarity: zero-variance input".into()));
    }
    Ok(cross * cross / (xx * yy))
}

#[derive(Debug, Clone)]
pub struct LayerSimilarity {
    pub layer: String,
    pub cca: f64,
    pub cka: f64,
}

/// Per-layer CCA and CKA between two activation dumps captured on the same
/// inputs (for example pre- vs post-adaptation, or two seeds, or two
/// algorithms).
pub fn compare_dumps(a: &ActivationDump, b: &ActivationDump) -> Result<Vec<LayerSimilarity>> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::ShapeMismatch {
            op: "compare_dumps",
            detail: format!("{} vs {} layers", a.layers.len(), b.layers.len()),
        });
    }
    let mut out = Vec::with_capacity(a.layers.len());
    for ((name_a, ta), (name_b, tb)) in a.layers.iter().zip(&b.layers) {
        if name_a != name_b {
            return Err(Error::ShapeMismatch {
                op: "compare_dumps",
                detail: format!("layer order mismatch: {name_a} vs {name_b}"),
            });
        }
        let oa = layer_observations(ta)?;
        let ob = layer_observations(tb)?;
        out.push(LayerSimilarity {
            layer: name_a.clone(),
            cca: cca_similarity(&oa, &ob)?,
            cka: cka_similarity(&oa, &ob)?,
        });
    }
    Ok(out)
}

/// Euclidean distance per named tensor between two parameter sets.
pub fn weight_distances(a: &ParamSet, b: &ParamSet) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(a.len());
    for (name, ta) in a.iter() {
        let tb = b
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        out.push((name.to_string(), ta.sub(tb)?.frobenius_norm()));
    }
    Ok(out)
}

/// Mean per-layer distance over several adapted copies of `base`, the
/// "how far do weights move during adaptation" measure.
pub fn mean_adaptation_distance(
    base: &ParamSet,
    adapted: &[ParamSet],
) -> Result<Vec<(String, f64)>> {
    if adapted.is_empty() {
        return Err(Error::Degenerate("no adapted parameter sets".into()));
    }
    let mut acc: Vec<(String, f64)> =
        base.iter().map(|(n, _)| (n.to_string(), 0.0)).collect();
    for ad in adapted {
        for (slot, (name, d)) in acc.iter_mut().zip(weight_distances(base, ad)?) {
            debug_assert_eq!(slot.0, name);
            slot.1 += d;
        }
    }
    let m = adapted.len() as f64;
    for slot in &mut acc {
        slot.1 /= m;
    }
    Ok(acc)
}

/// Mean per-layer similarity between activations at the meta-initialization
/// and after per-episode adaptation, on each episode's target inputs.
pub fn pre_post_analysis(
    cfg: &crate::model::ModelConfig,
    params: &ParamSet,
    episodes: &[crate::taskgen::Episode],
    lr: f64,
    steps: usize,
    mask: &[String],
) -> Result<Vec<LayerSimilarity>> {
    use crate::model::{forward_with_activations, Phase};
    if episodes.is_empty() {
        return Err(Error::Degenerate("pre_post_analysis needs episodes".into()));
    }
    let mut acc: Option<Vec<LayerSimilarity>> = None;
    for (idx, ep) in episodes.iter().enumerate() {
        let adapted = crate::inference::adapt_for_eval(cfg, params, ep, lr, steps, mask)?;
        let (_, pre) =
            forward_with_activations(cfg, params, &ep.target_x, Phase::PreAdaptation, idx as u64, 0)?;
        let (_, post) = forward_with_activations(
            cfg,
            &adapted,
            &ep.target_x,
            Phase::PostAdaptation,
            idx as u64,
            0,
        )?;
        let sims = compare_dumps(&pre, &post)?;
        acc = Some(match acc {
            None => sims,
            Some(mut a) => {
                for (slot, s) in a.iter_mut().zip(sims) {
                    slot.cca += s.cca;
                    slot.cka += s.cka;
                }
                a
            }
        });
    }
    let n = episodes.len() as f64;
    let mut out = acc.expect("nonempty");
    for s in &mut out {
        s.cca /= n;
        s.cka /= n;
    }
    Ok(out)
}

/// Least-squares line fit. `degenerate` is set when x has (numerically) no
/// variance, in which case slope and r2 are meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub degenerate: bool,
}

pub fn linear_fit(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 2 {
        return Err(Error::Degenerate("line fit needs at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx < 1e-12 {
        return Ok(FitResult { slope: 0.0, intercept: my, r2: 0.0, degenerate: true });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy < 1e-12 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(FitResult { slope, intercept, r2, degenerate: false })
}

#[derive(Debug, Clone)]
pub struct ScatterPoint {
    pub layer: String,
    pub seed_pair: (usize, usize),
    /// cca(pre_i, pre_j)
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct CrossSeedAnalysis {
    /// keyed by comparison: "pre-post", "post-pre", "post-post"
    pub scatters: Vec<(String, Vec<ScatterPoint>)>,
    pub fits: Vec<(String, FitResult)>,
}

fn dump_layer_obs(d: &ActivationDump) -> Result<Vec<(String, Tensor)>> {
    d.layers
        .iter()
        .map(|(n, t)| Ok((n.clone(), layer_observations(t)?)))
        .collect()
}

/// Appendix-style cross-seed regression: per seed pair and layer, the
/// pre/pre similarity is the x coordinate, and each mixed comparison
/// supplies y values for its own line fit.
pub fn cross_seed_analysis(
    pre: &[ActivationDump],
    post: &[ActivationDump],
) -> Result<CrossSeedAnalysis> {
    if pre.len() < 2 || pre.len() != post.len() {
        return Err(Error::Degenerate("cross_seed_analysis needs >= 2 matched runs".into()));
    }
    let pre_obs: Vec<Vec<(String, Tensor)>> =
        pre.iter().map(dump_layer_obs).collect::<Result<_>>()?;
    let post_obs: Vec<Vec<(String, Tensor)>> =
        post.iter().map(dump_layer_obs).collect::<Result<_>>()?;
    let comparisons = ["pre-post", "post-pre", "post-post"];
    let mut scatters: Vec<(String, Vec<ScatterPoint>)> =
        comparisons.iter().map(|c| (c.to_string(), Vec::new())).collect();
    for i in 0..pre.len() {
        for j in 0..pre.len() {
            if i == j {
                continue;
            }
            for l in 0..pre_obs[i].len() {
                let layer = pre_obs[i][l].0.clone();
                let x = cca_similarity(&pre_obs[i][l].1, &pre_obs[j][l].1)?;
                let ys = [
                    cca_similarity(&pre_obs[i][l].1, &post_obs[j][l].1)?,
                    cca_similarity(&post_obs[i][l].1, &pre_obs[j][l].1)?,
                    cca_similarity(&post_obs[i][l].1, &post_obs[j][l].1)?,
                ];
                for (k, y) in ys.into_iter().enumerate() {
                    scatters[k].1.push(ScatterPoint {
                        layer: layer.clone(),
                        seed_pair: (i, j),
                        x,
                        y,
                    });
                }
            }
        }
    }
    let mut fits = Vec::new();
    for (name, pts) in &scatters {
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
        fits.push((name.clone(), linear_fit(&xy)?));
    }
    Ok(CrossSeedAnalysis { scatters, fits })
}

#[derive(Debug, Clone)]
pub struct CrossAlgoTable {
    /// [maml-maml, anil-anil, anil-maml]
    pub cca: [f64; 3],
    pub cka: [f64; 3],
}

fn body_mean_similarity(a: &ActivationDump, b: &ActivationDump) -> Result<(f64, f64)> {
    let mut cca_sum = 0.0;
    let mut cka_sum = 0.0;
    let mut n = 0usize;
    for ((name, ta), (_, tb)) in a.layers.iter().zip(&b.layers) {
        if name == "head" {
            continue;
        }
        let oa = layer_observations(ta)?;
        let ob = layer_observations(tb)?;
        cca_sum += cca_similarity(&oa, &ob)?;
        cka_sum += cka_similarity(&oa, &ob)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no body layers to compare".into()));
    }
    Ok((cca_sum / n as f64, cka_sum / n as f64))
}

fn group_mean(
    xs: &[ActivationDump],
    ys: &[ActivationDump],
    within: bool,
) -> Result<(f64, f64)> {
    let mut cca_sum = 0.0;
    let mut cka_sum = 0.0;
    let mut n = 0usize;
    for (i, a) in xs.iter().enumerate() {
        for (j, b) in ys.iter().enumerate() {
            if within && j <= i {
                continue;
            }
            let (c, k) = body_mean_similarity(a, b)?;
            cca_sum += c;
            cka_sum += k;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("cross_algo_similarity needs >= 2 runs per group".into()));
    }
    Ok((cca_sum / n as f64, cka_sum / n as f64))
}

/// Body-averaged MAML-MAML / ANIL-ANIL / ANIL-MAML similarity table over
/// activation dumps captured on shared inputs.
pub fn cross_algo_similarity(
    maml: &[ActivationDump],
    anil: &[ActivationDump],
) -> Result<CrossAlgoTable> {
    let (mm_c, mm_k) = group_mean(maml, maml, true)?;
    let (aa_c, aa_k) = group_mean(anil, anil, true)?;
    let (am_c, am_k) = group_mean(anil, maml, false)?;
    Ok(CrossAlgoTable { cca: [mm_c, aa_c, am_c], cka: [mm_k, aa_k, am_k] })
}

pub const SIMILARITY_CSV_HEADER: &str = "# metalab repsim v1\nlabel,layer,cca,cka";

pub fn write_similarity_csv(
    path: &Path,
    rows: &[(String, Vec<LayerSimilarity>)],
) -> Result<()> {
    let mut s = String::from(SIMILARITY_CSV_HEADER);
    s.push('\n');
    for (label, sims) in rows {
        for ls in sims {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", label, ls.layer, ls.cca, ls.cka));
        }
    }
    recordio::atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand::Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = SeedStream::new(seed).rng();
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // symmetric Jacobi eigensolver, used only as an independent oracle
    fn jacobi_eigenvalues(a: &Tensor) -> Vec<f64> {
        let n = a.shape()[0];
        let mut m: Vec<Vec<f64>> =
            (0..n).map(|i| (0..n).map(|j| a.at2(i, j)).collect()).collect();
        for _ in 0..200 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += m[i][j] * m[i][j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if m[p][q].abs() < 1e-15 {
                        continue;
                    }
                    let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[k][p], m[k][q]);
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[p][k], m[q][k]);
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ev
    }

    // oracle: canonical correlations from the eigenvalues of
    // K = Syy^{-1/2} Syx Sxx^{-1} Sxy Syy^{-1/2}
    fn cca_oracle(x: &Tensor, y: &Tensor) -> f64 {
        let xc = center_columns(x);
        let yc = center_columns(y);
        let mut sxx = cov(&xc, &xc).unwrap();
        let mut syy = cov(&yc, &yc).unwrap();
        let sxy = cov(&xc, &yc).unwrap();
        for i in 0..sxx.shape()[0] {
            let v = sxx.at2(i, i);
            sxx.set2(i, i, v + CCA_RIDGE);
        }
        for i in 0..syy.shape()[0] {
            let v = syy.at2(i, i);
            syy.set2(i, i, v + CCA_RIDGE);
        }
        // Sxx^{-1} through inv_sqrt twice
        let ih = sym_inv_sqrt(&sxx).unwrap();
        let sxx_inv = ih.matmul(&ih).unwrap();
        let iy = sym_inv_sqrt(&syy).unwrap();
        let syx = sxy.transposed().unwrap();
        let k = iy
            .matmul(&syx)
            .unwrap()
            .matmul(&sxx_inv)
            .unwrap()
            .matmul(&sxy)
            .unwrap()
            .matmul(&iy)
            .unwrap();
        let ev = jacobi_eigenvalues(&k);
        let kdim = x.shape()[1].min(y.shape()[1]);
        ev.iter().take(kdim).map(|&l| l.max(0.0).sqrt().clamp(0.0, 1.0)).sum::<f64>() / kdim as f64
    }

    #[test]
    fn cca_matches_eigensolver_oracle() {
        let x = random_matrix(200, 6, 1);
        // y mixes x with noise so correlations are strictly between 0 and 1
        let mix = random_matrix(6, 4, 2);
        let noise = random_matrix(200, 4, 3);
        let y = x.matmul(&mix).unwrap().add(&noise.scale(0.5)).unwrap();
        let got = cca_similarity(&x, &y).unwrap();
        let want = cca_oracle(&x, &y);
        assert!((got - want).abs() < 1e-8, "got {got}, oracle {want}");
    }

    #[test]
    fn cca_of_linear_transform_is_one() {
        let x = random_matrix(300, 5, 4);
        // invertible map: identity plus small random perturbation
        let mut a = random_matrix(5, 5, 5).scale(0.2);
        for i in 0..5 {
            let v = a.at2(i, i);
            a.set2(i, i, v + 1.0);
        }
        let y = x.matmul(&a).unwrap();
        let c = cca_similarity(&x, &y).unwrap();
        assert!(c > 0.999, "cca {c}");
    }

    #[test]
    fn cca_of_independent_noise_is_low() {
        let x = random_matrix(800, 5, 6);
        let y = random_matrix(800, 5, 7);
        let c = cca_similarity(&x, &y).unwrap();
        assert!(c < 0.3, "cca {c}");
    }

    #[test]
    fn cka_matches_gram_route_oracle() {
        let x = random_matrix(60, 5, 8);
        let y = random_matrix(60, 7, 9);
        let got = cka_similarity(&x, &y).unwrap();
        // tr(Kx Ky) / sqrt(tr(Kx Kx) tr(Ky Ky)) with centered Gram matrices
        let xc = center_columns(&x);
        let yc = center_columns(&y);
        let kx = xc.matmul(&xc.transposed().unwrap()).unwrap();
        let ky = yc.matmul(&yc.transposed().unwrap()).unwrap();
        let tr = |a: &Tensor, b: &Tensor| {
            let p = a.matmul(b).unwrap();
            (0..p.shape()[0]).map(|i| p.at2(i, i)).sum::<f64>()
        };
        let want = tr(&kx, &ky) / (tr(&kx, &kx) * tr(&ky, &ky)).sqrt();
        assert!((got - want).abs() < 1e-10, "got {got}, oracle {want}");
    }

    #[test]
    fn cka_invariant_to_scale_and_orthogonal_maps() {
        let x = random_matrix(100, 4, 10);
        let base = cka_similarity(&x, &x).unwrap();
        assert!((base - 1.0).abs() < 1e-12);
        let scaled = cka_similarity(&x, &x.scale(3.7)).unwrap();
        assert!((scaled - 1.0).abs() < 1e-12);
        // rotation in the first two columns
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Tensor::matrix(
            4,
            4,
            vec![c, -s, 0.0, 0.0, s, c, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let y = x.matmul(&rot).unwrap();
        let r = cka_similarity(&x, &y).unwrap();
        assert!((r - 1.0).abs() < 1e-10, "cka {r}");
    }

    #[test]
    fn conv_flattening_moves_spatial_into_rows() {
        let t = Tensor::new(vec![2, 3, 2, 2], (0..24).map(|v| v as f64).collect()).unwrap();
        let o = layer_observations(&t).unwrap();
        assert_eq!(o.shape(), &[8, 3]);
        // first observation is channel values at example 0, position (0,0)
        assert_eq!(o.at2(0, 0), 0.0);
        assert_eq!(o.at2(0, 1), 4.0);
        assert_eq!(o.at2(0, 2), 8.0);
        // second observation is position (0,1)
        assert_eq!(o.at2(1, 0), 1.0);
    }

    #[test]
    fn too_few_observations_refused() {
        let x = random_matrix(5, 8, 11);
        let y = random_matrix(5, 8, 12);
        assert!(cca_similarity(&x, &y).is_err());
        assert!(cka_similarity(&x, &y).is_err());
    }

    #[test]
    fn weight_distance_is_per_layer_euclidean() {
        let a = ParamSet::new(
            vec![
                ("l1".into(), Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()),
                ("l2".into(), Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()),
            ],
            vec![],
        )
        .unwrap();
        let b = ParamSet::new(
            vec![
                ("l1".into(), Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()),
                ("l2".into(), Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap()),
            ],
            vec![],
        )
        .unwrap();
        let d = weight_distances(&a, &b).unwrap();
        assert_eq!(d[0], ("l1".to_string(), 5.0));
        assert_eq!(d[1], ("l2".to_string(), 0.0));
        let mean = mean_adaptation_distance(&a, &[b.clone(), a.clone()]).unwrap();
        assert_eq!(mean[0], ("l1".to_string(), 2.5));
    }

    #[test]
    fn linear_fit_recovers_exact_line_and_flags_degenerate() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        let f = linear_fit(&pts).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(!f.degenerate);
        let flat = vec![(0.5, 1.0), (0.5, 2.0), (0.5, 3.0)];
        assert!(linear_fit(&flat).unwrap().degenerate);
    }

    fn fake_dump(seed: u64) -> crate::model::ActivationDump {
        crate::model::ActivationDump {
            layers: vec![
                ("conv1".to_string(), random_matrix(120, 4, seed)),
                ("head".to_string(), random_matrix(120, 5, seed + 1000)),
            ],
            phase: crate::model::Phase::PreAdaptation,
            task_id: 0,
            seed,
        }
    }

    #[test]
    fn cross_seed_self_comparison_is_degenerate_and_identity() {
        let d = fake_dump(1);
        let analysis = cross_seed_analysis(&[d.clone(), d.clone()], &[d.clone(), d.clone()]).unwrap();
        for (_, pts) in &analysis.scatters {
            for p in pts {
                assert!((p.x - 1.0).abs() < 1e-4, "x {}", p.x);
                assert!((p.y - 1.0).abs() < 1e-4, "y {}", p.y);
            }
        }
        for (_, fit) in &analysis.fits {
            assert!(fit.degenerate);
        }
    }

    #[test]
    fn cross_algo_self_similarity_is_one() {
        let d1 = fake_dump(1);
        let table = cross_algo_similarity(&[d1.clone(), d1.clone()], &[d1.clone(), d1.clone()]).unwrap();
        for v in table.cca.iter().chain(table.cka.iter()) {
            assert!((v - 1.0).abs() < 1e-4, "similarity {v}");
        }
        // distinct runs in each group give values strictly below 1
        let table2 = cross_algo_similarity(&[fake_dump(1), fake_dump(2)], &[fake_dump(3), fake_dump(4)]).unwrap();
        assert!(table2.cca[0] < 1.0 && table2.cka[2] < 1.0);
    }

    #[test]
    fn pre_post_with_zero_steps_scores_one_everywhere() {
        use crate::model::{ConvConfig, ModelConfig};
        use crate::taskgen::{self, Split};
        let cfg = ModelConfig::Conv(ConvConfig { filters: 4, ..ConvConfig::default() });
        let params = crate::model::init_params(&cfg, 1).unwrap();
        let family = taskgen::make_glyph_family(taskgen::GlyphDescriptor::default(), 2).unwrap();
        let mut rng = SeedStream::new(3).rng();
        let ep = taskgen::sample_episode(&family, Split::Train, 5, 1, 15, &mut rng).unwrap();
        let mask = params.names();
        let sims = pre_post_analysis(&cfg, &params, &[ep], 0.01, 0, &mask).unwrap();
        assert_eq!(sims.len(), 5);
        for s in &sims {
            // an untrained head can emit logits with a near-zero-variance
            // direction; the covariance ridge sends that component's
            // correlation to 0 even for identical inputs, so the exact
            // identity check uses CKA (no ridge) and conv-layer CCA
            assert!(s.cka > 1.0 - 1e-9, "{} cka {}", s.layer, s.cka);
            if s.layer != "head" {
                assert!(s.cca > 1.0 - 1e-4, "{} cca {}", s.layer, s.cca);
            } else {
                assert!(s.cca > 0.75, "{} cca {}", s.layer, s.cca);
            }
        }
    }
}
