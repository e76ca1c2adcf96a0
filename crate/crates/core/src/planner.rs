//! Beam search over the autoregressive heads, evaluator-based grasp selection and
//! the non-learned baselines.

use std::cmp::Ordering;

use rand::Rng;

use crate::graspspace::{Grasp, GraspDim};
use crate::model::{Embedding, ModelError, ModelParams};
use crate::nn::Real;
use crate::simworld::{quick_reject, DepthImage, Scene, SimConfig};

/// Beam width used by the planner by default.
pub const DEFAULT_BEAM_WIDTH: usize = 20;
pub const DEFAULT_CANDIDATES: usize = 20;

/// Descending by log probability, then ascending bucket sequence.
fn rank_order<F: Real>(a: &(Vec<u8>, F), b: &(Vec<u8>, F)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// Top `k` complete grasps of a width-`beam_width` beam search, with their
/// cumulative log probabilities.
pub fn beam_search<F: Real>(
    params: &ModelParams<F>,
    s: &Embedding<F>,
    beam_width: usize,
    k: usize,
) -> Result<Vec<(Grasp, F)>, ModelError> {
    if beam_width == 0 || k > beam_width {
        return Err(ModelError::Config(format!(
            "beam search needs 1 <= k <= width, got k={k}, width={beam_width}"
        )));
    }
    let net = &params.planner_net;
    let emb = ndarray::Array2::from_shape_vec((1, s.0.len()), s.0.clone()).expect("row vector");
    let mut beams: Vec<(Vec<u8>, F)> = vec![(Vec::new(), F::zero())];
    for head in 0..net.heads.len() {
        let prefixes: Vec<u8> = beams.iter().flat_map(|b| b.0.iter().copied()).collect();
        let lp = net.head_log_probs(&params.planner, head, &emb, &vec![0; beams.len()], &prefixes)?;
        let mut children = Vec::with_capacity(beams.len() * net.buckets);
        for (r, (prefix, score)) in beams.iter().enumerate() {
            for c in 0..net.buckets {
                let mut seq = Vec::with_capacity(head + 1);
                seq.extend_from_slice(prefix);
                seq.push(c as u8);
                children.push((seq, *score + lp[[r, c]]));
            }
        }
        if children.len() > beam_width {
            children.select_nth_unstable_by(beam_width - 1, rank_order);
            children.truncate(beam_width);
        }
        children.sort_by(rank_order);
        beams = children;
    }
    beams.truncate(k);
    Ok(beams.into_iter().map(|(g, lp)| (Grasp(g), lp)).collect())
}

/// Exhaustive top-`k` from the enumerated distribution, with the same tie rule.
pub fn exhaustive_top_k<F: Real>(params: &ModelParams<F>, s: &Embedding<F>, k: usize) -> Result<Vec<(Grasp, F)>, ModelError> {
    let logp = params.full_log_distribution(s)?;
    let spec = params.spec();
    let mut all: Vec<(Vec<u8>, F)> = logp
        .iter()
        .enumerate()
        .map(|(i, &v)| (spec.grasp_at(i as u64).0, v))
        .collect();
    let k = k.min(all.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    all.select_nth_unstable_by(k - 1, rank_order);
    all.truncate(k);
    all.sort_by(rank_order);
    Ok(all.into_iter().map(|(g, v)| (Grasp(g), v)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub grasp: Grasp,
    pub log_prob: f64,
    pub score: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// In beam rank order (descending log probability).
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
}

impl PlanResult {
    pub fn chosen_grasp(&self) -> &Grasp {
        &self.candidates[self.chosen].grasp
    }

    /// One line per candidate: rank, buckets, log prob, score, feasibility, chosen flag.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (r, c) in self.candidates.iter().enumerate() {
            let buckets: Vec<String> = c.grasp.0.iter().map(|b| b.to_string()).collect();
            out.push_str(&format!(
                "rank={r} grasp={} log_prob={:?} score={:?} feasible={} chosen={}\n",
                buckets.join(","),
                c.log_prob,
                c.score,
                c.feasible as u8,
                (r == self.chosen) as u8
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut candidates = Vec::new();
        let mut chosen = None;
        for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let mut fields = std::collections::HashMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| format!("line {}: bad token {tok}", n + 1))?;
                fields.insert(k, v);
            }
            let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("line {}: missing {k}", n + 1));
            let grasp = Grasp(
                get("grasp")?
                    .split(',')
                    .map(|b| b.parse().map_err(|_| format!("line {}: bad bucket", n + 1)))
                    .collect::<Result<_, _>>()?,
            );
            let num = |k: &str| -> Result<f64, String> { get(k)?.parse().map_err(|_| format!("line {}: bad {k}", n + 1)) };
            candidates.push(Candidate {
                grasp,
                log_prob: num("log_prob")?,
                score: num("score")?,
                feasible: get("feasible")? == "1",
            });
            if get("chosen")? == "1" {
                chosen = Some(n);
            }
        }
        let chosen = chosen.ok_or("no chosen candidate")?;
        Ok(Self { candidates, chosen })
    }
}

/// Index of the highest-scoring feasible candidate; earlier rank wins ties. With no
/// feasible candidate the top-ranked one is returned.
pub fn select_candidate(candidates: &[Candidate]) -> usize {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.feasible && best.is_none_or(|b| c.score > candidates[b].score) {
            best = Some(i);
        }
    }
    best.unwrap_or(0)
}

/// Encode, beam-search `k` candidates, score each hand image with the evaluator and
/// pick the best feasible one.
pub fn plan_grasp<F: Real>(
    observations: &[DepthImage],
    params: &ModelParams<F>,
    k: usize,
    beam_width: usize,
    scene: &Scene,
    sim: &SimConfig,
) -> Result<PlanResult, ModelError> {
    let s = params.encode(observations)?;
    let top = beam_search(params, &s, beam_width, k)?;
    let hands: Vec<DepthImage> = top.iter().map(|(g, _)| sim.render_hand(scene, g)).collect();
    let refs: Vec<&DepthImage> = hands.iter().collect();
    let scores = params.evaluate_scores(&refs)?;
    let candidates: Vec<Candidate> = top
        .into_iter()
        .zip(scores)
        .map(|((grasp, lp), score)| Candidate {
            feasible: !quick_reject(scene, &grasp, sim),
            grasp,
            log_prob: lp.f64(),
            score,
        })
        .collect();
    let chosen = select_candidate(&candidates);
    Ok(PlanResult { candidates, chosen })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    Centroid,
}

/// Random: uniform over the whole space. Centroid: position buckets containing the
/// object's center of mass with uniformly sampled angles.
pub fn baseline_grasp<R: Rng + ?Sized>(kind: BaselineKind, scene: &Scene, sim: &SimConfig, rng: &mut R) -> Grasp {
    let spec = &sim.grasp;
    match kind {
        BaselineKind::Random => spec.sample_uniform(rng),
        BaselineKind::Centroid => {
            let (bbox, com) = (scene.bbox(), scene.com());
            Grasp(
                spec.dims()
                    .iter()
                    .map(|&d| match d {
                        GraspDim::X | GraspDim::Y | GraspDim::Z => {
                            let k = d as usize;
                            spec.bucket_of(com[k], bbox.min[k], bbox.max[k])
                        }
                        _ => rng.random_range(0..spec.buckets()) as u8,
                    })
                    .collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graspspace::GraspSpec;
    use crate::model::{init_params, ArchConfig, ConvLayerSpec};
    use crate::objectgen::{box_mesh, object_from_mesh, TargetSize};
    use rand::SeedableRng;

    fn arch(buckets: usize) -> ArchConfig {
        ArchConfig {
            grasp: GraspSpec::new(4, buckets).unwrap(),
            scene_resolution: 16,
            encoder_convs: vec![ConvLayerSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            }],
            encoder_dense: vec![16],
            head_hidden: vec![16],
            ..ArchConfig::default()
        }
    }

    fn model(seed: u64, buckets: usize) -> (ModelParams<f64>, Embedding<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m: ModelParams<f64> = init_params(&arch(buckets), &mut rng).unwrap();
        // Sharpen the heads so the distribution is far from uniform.
        for v in &mut m.planner {
            *v *= 3.0;
        }
        let img = DepthImage {
            height: 16,
            width: 16,
            data: (0..256).map(|_| rng.random_range(0.4f32..0.5)).collect(),
        };
        let s = m.encode(&[img]).unwrap();
        (m, s)
    }

    #[test]
    fn saturated_beam_is_exact() {
        for (seed, buckets) in [(1, 20), (2, 5)] {
            let (m, s) = model(seed, buckets);
            let width = buckets.pow(3);
            let beam = beam_search(&m, &s, width, 20).unwrap();
            let exact = exhaustive_top_k(&m, &s, 20).unwrap();
            assert_eq!(beam.len(), 20);
            for ((g1, l1), (g2, l2)) in beam.iter().zip(&exact) {
                assert_eq!(g1, g2);
                assert!((l1 - l2).abs() <= 1e-10);
                assert!((m.grasp_log_prob(&s, g1).unwrap() - l1).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn top1_log_prob_grows_with_width() {
        let (m, s) = model(3, 20);
        let mut prev = f64::NEG_INFINITY;
        for width in [1, 5, 20, 100] {
            let top = beam_search(&m, &s, width, 1).unwrap()[0].1;
            assert!(top >= prev - 1e-12);
            prev = top;
        }
        let full = exhaustive_top_k(&m, &s, 1).unwrap()[0].1;
        assert!(prev <= full + 1e-12);
        assert!(beam_search(&m, &s, 5, 6).is_err());
    }

    #[test]
    fn one_hot_heads_leave_one_path() {
        let (mut m, s) = model(4, 20);
        // Zero everything, then make each head's output bias prefer bucket 7.
        for v in &mut m.planner {
            *v = 0.0;
        }
        let layout = m.planner_net.layout.clone();
        for i in 0..4 {
            let t = layout.find(&format!("head{i}.dense1.b")).unwrap();
            m.planner[t.offset + 7] = 1e3;
        }
        let top = beam_search(&m, &s, 20, 3).unwrap();
        assert_eq!(top[0].0, Grasp(vec![7; 4]));
        assert!(top[0].1.abs() < 1e-12);
        assert!(top[1].1 < -900.0);
    }

    fn cube_scene() -> Scene {
        Scene::place(&object_from_mesh(&box_mesh([0.05; 3]), "c".into(), TargetSize::Keep, 64), 0.0)
    }

    #[test]
    fn zero_evaluator_picks_best_ranked_feasible() {
        let sim = SimConfig::default();
        let scene = cube_scene();
        let arch = ArchConfig {
            scene_resolution: 64,
            ..arch(20)
        };
        let mut m: ModelParams<f64> = init_params(&arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap();
        m.evaluator.iter_mut().for_each(|v| *v = 0.0);
        let obs = vec![sim.render_scene(&scene)];
        let plan = plan_grasp(&obs, &m, 20, 20, &scene, &sim).unwrap();
        assert!(plan.candidates.iter().all(|c| c.score == 0.5));
        let first_feasible = plan.candidates.iter().position(|c| c.feasible).unwrap_or(0);
        assert_eq!(plan.chosen, first_feasible);
        let lps: Vec<f64> = plan.candidates.iter().map(|c| c.log_prob).collect();
        assert!(lps.windows(2).all(|w| w[0] >= w[1]));
        let single = plan_grasp(&obs, &m, 1, 20, &scene, &sim).unwrap();
        assert_eq!(single.chosen, 0);
        assert_eq!(single.candidates[0].grasp, plan.candidates[0].grasp);
        assert_eq!(PlanResult::from_text(&plan.to_text()).unwrap(), plan);
    }

    #[test]
    fn selection_rules() {
        let c = |score: f64, feasible: bool| Candidate {
            grasp: Grasp(vec![0; 4]),
            log_prob: 0.0,
            score,
            feasible,
        };
        assert_eq!(select_candidate(&[c(0.9, false), c(0.2, true), c(0.7, true)]), 2);
        assert_eq!(select_candidate(&[c(0.9, false), c(0.95, false)]), 0);
        assert_eq!(select_candidate(&[c(0.5, true), c(0.5, true)]), 0);
    }

    #[test]
    fn baselines() {
        let sim = SimConfig::default();
        let scene = cube_scene();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let g = baseline_grasp(BaselineKind::Centroid, &scene, &sim, &mut rng);
            for &b in &g.0[..3] {
                assert!(b == 9 || b == 10, "{g}");
            }
        }
        let mut counts = [[0usize; 20]; 4];
        let draws = 100_000;
        for _ in 0..draws {
            let g = baseline_grasp(BaselineKind::Random, &scene, &sim, &mut rng);
            for (d, &b) in g.0.iter().enumerate() {
                counts[d][b as usize] += 1;
            }
        }
        let expected = draws as f64 / 20.0;
        for c in counts {
            let chi2: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
            assert!(chi2 < 43.82, "{chi2}");
        }
    }

    proptest::proptest! {
        #[test]
        fn selection_maximizes_feasible_score(
            rows in proptest::collection::vec((0u8..4, proptest::bool::ANY), 1..25)
        ) {
            let cands: Vec<Candidate> = rows
                .iter()
                .map(|&(s, feasible)| Candidate {
                    grasp: Grasp(vec![0; 4]),
                    log_prob: 0.0,
                    score: s as f64 / 4.0,
                    feasible,
                })
                .collect();
            let chosen = select_candidate(&cands);
            match cands.iter().position(|c| c.feasible) {
                None => proptest::prop_assert_eq!(chosen, 0),
                Some(_) => {
                    let best = cands.iter().filter(|c| c.feasible).map(|c| c.score).fold(f64::MIN, f64::max);
                    proptest::prop_assert!(cands[chosen].feasible);
                    proptest::prop_assert_eq!(cands[chosen].score, best);
                    proptest::prop_assert!(cands[..chosen].iter().all(|c| !c.feasible || c.score < best));
                }
            }
        }
    }
}
