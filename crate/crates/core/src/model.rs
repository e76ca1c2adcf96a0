//! Learnable functions: image encoder, autoregressive grasp heads and the grasp
//! evaluator, with exact log-likelihoods over the discrete grasp space.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::graspspace::{Grasp, GraspSpec};
use crate::nn::{log_softmax_rows, mat, mat_mut, channels_to_rows, rows_to_channels, Activation, Conv, Dense, Layout, Real};
use crate::simworld::DepthImage;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("image shape mismatch: expected {expected:?}, got {got:?}")]
    ImageShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected {expected} observation(s) per scene, got {got}")]
    ViewCount { expected: usize, got: usize },
    #[error("head {head} takes a prefix of length {expected}, got {got}")]
    PrefixLength {
        head: usize,
        expected: usize,
        got: usize,
    },
    #[error("grasp space of {0} grasps is too large to enumerate")]
    SpaceTooLarge(u64),
    #[error("invalid architecture: {0}")]
    Config(String),
}

/// Largest grasp space `full_distribution` will enumerate.
pub const MAX_ENUMERATION: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

fn default_convs() -> Vec<ConvLayerSpec> {
    [8, 16, 32]
        .into_iter()
        .map(|channels| ConvLayerSpec {
            channels,
            kernel: 3,
            stride: 2,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub grasp: GraspSpec,
    pub scene_views: usize,
    pub scene_resolution: usize,
    pub hand_resolution: usize,
    pub encoder_convs: Vec<ConvLayerSpec>,
    /// Dense widths after the conv stacks; the last entry is the embedding size.
    pub encoder_dense: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub evaluator_convs: Vec<ConvLayerSpec>,
    pub evaluator_hidden: Vec<usize>,
    pub activation: Activation,
    /// Depth `d` enters the networks as `(offset - d) * depth_scale`.
    pub scene_depth_offset: f64,
    pub hand_depth_offset: f64,
    pub depth_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            grasp: GraspSpec::default(),
            scene_views: 1,
            scene_resolution: 64,
            hand_resolution: 32,
            encoder_convs: default_convs(),
            encoder_dense: vec![64],
            head_hidden: vec![64, 64],
            evaluator_convs: default_convs(),
            evaluator_hidden: vec![64],
            activation: Activation::Relu,
            scene_depth_offset: 0.5,
            hand_depth_offset: 0.1,
            depth_scale: 10.0,
        }
    }
}

impl ArchConfig {
    pub fn embedding_dim(&self) -> usize {
        *self.encoder_dense.last().expect("validated")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.encoder_dense.is_empty() || self.encoder_dense.contains(&0) {
            return bad("encoder needs at least one dense layer of positive width");
        }
        if self.scene_views == 0 || self.scene_resolution == 0 || self.hand_resolution == 0 {
            return bad("image sizes and view count must be positive");
        }
        let convs = self.encoder_convs.iter().chain(&self.evaluator_convs);
        if convs.clone().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("conv layers need positive channels, kernel and stride");
        }
        if self.head_hidden.contains(&0) || self.evaluator_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth scale must be positive");
        }
        Ok(())
    }
}

fn build_convs(layout: &mut Layout, prefix: &str, specs: &[ConvLayerSpec], res: usize, act: Activation) -> Vec<Conv> {
    let (mut c, mut h, mut w) = (1, res, res);
    let mut out = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let conv = Conv::register(
            layout,
            &format!("{prefix}.conv{k}"),
            c,
            spec.channels,
            spec.kernel,
            spec.stride,
            spec.kernel / 2,
            h,
            w,
            act,
        );
        (c, h, w) = (conv.cout, conv.ho, conv.wo);
        out.push(conv);
    }
    out
}

fn conv_out_len(convs: &[Conv], res: usize) -> usize {
    convs.last().map_or(res * res, |c| c.out_len())
}

/// Normalized network input `[1, N, H, W]` for a set of images.
fn image_tensor<F: Real>(images: &[&DepthImage], res: usize, offset: f64, scale: f64) -> Result<Vec<F>, ModelError> {
    let mut out = Vec::with_capacity(images.len() * res * res);
    for img in images {
        if img.height != res || img.width != res {
            return Err(ModelError::ImageShape {
                expected: (res, res),
                got: (img.height, img.width),
            });
        }
        out.extend(
            img.data
                .iter()
                .map(|&d| F::of(((offset - d as f64) * scale).clamp(-5.0, 5.0))),
        );
    }
    Ok(out)
}

struct ConvCache<F> {
    cols: Array2<F>,
    out: Array2<F>,
}

fn conv_stack_forward<F: Real>(convs: &[Conv], p: &[F], x: Vec<F>, n: usize) -> (Array2<F>, Vec<ConvCache<F>>) {
    let mut caches = Vec::with_capacity(convs.len());
    let mut cur = Array2::from_shape_vec((1, x.len()), x).expect("flat input");
    for conv in convs {
        let input = cur.as_slice().expect("standard layout");
        let (cols, out) = conv.forward(p, input, n);
        cur = out.clone();
        caches.push(ConvCache { cols, out });
    }
    (channels_to_rows(&cur, n), caches)
}

fn conv_stack_backward<F: Real>(convs: &[Conv], p: &[F], grad: &mut [F], caches: &[ConvCache<F>], drows: &ArrayView2<F>, n: usize) {
    let Some(last) = convs.last() else {
        return;
    };
    let mut d = rows_to_channels(drows, last.cout);
    for (k, conv) in convs.iter().enumerate().rev() {
        let cache = &caches[k];
        let dx = conv.backward(p, grad, &cache.cols, &cache.out, d, n, k > 0);
        if let Some(dx) = dx {
            let prev = &convs[k - 1];
            d = Array2::from_shape_vec((prev.cout, n * prev.ho * prev.wo), dx).expect("conv shape");
        } else {
            break;
        }
    }
}

/// First head layer, split into the embedding rows and the one-hot prefix rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Head {
    pub prefix_len: usize,
    embed_w: usize,
    prefix_w: usize,
    bias: usize,
    first_out: usize,
    first_act: Option<Activation>,
    rest: Vec<Dense>,
}

/// Autoregressive planner: per-view conv stacks, dense embedding layers, heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerNet {
    pub layout: Layout,
    pub views: Vec<Vec<Conv>>,
    pub dense: Vec<Dense>,
    pub heads: Vec<Head>,
    pub embed: usize,
    pub buckets: usize,
    resolution: usize,
    depth_offset: f64,
    depth_scale: f64,
}

pub struct EncoderCache<F> {
    n: usize,
    views: Vec<Vec<ConvCache<F>>>,
    dense_in: Vec<Array2<F>>,
    dense_out: Vec<Array2<F>>,
}

pub struct HeadCache<F> {
    head: usize,
    scene_of_row: Vec<usize>,
    prefixes: Vec<u8>,
    first: Array2<F>,
    rest_in: Vec<Array2<F>>,
    rest_out: Vec<Array2<F>>,
}

impl PlannerNet {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut layout = Layout::default();
        let act = arch.activation;
        let views: Vec<Vec<Conv>> = (0..arch.scene_views)
            .map(|v| build_convs(&mut layout, &format!("encoder.view{v}"), &arch.encoder_convs, arch.scene_resolution, act))
            .collect();
        let mut width: usize = views
            .iter()
            .map(|c| conv_out_len(c, arch.scene_resolution))
            .sum();
        let mut dense = Vec::new();
        for (k, &out) in arch.encoder_dense.iter().enumerate() {
            let last = k + 1 == arch.encoder_dense.len();
            dense.push(Dense::register(&mut layout, &format!("encoder.dense{k}"), width, out, (!last).then_some(act)));
            width = out;
        }
        let embed = width;
        let buckets = arch.grasp.buckets();
        let mut heads = Vec::new();
        for i in 0..arch.grasp.n() {
            let prefix_len = i;
            let inputs = embed + buckets * prefix_len;
            let first_out = arch.head_hidden.first().copied().unwrap_or(buckets);
            let w = layout.add(format!("head{i}.dense0.w"), vec![inputs, first_out], inputs);
            let bias = layout.add(format!("head{i}.dense0.b"), vec![first_out], 0);
            let mut rest = Vec::new();
            let mut width = first_out;
            for k in 1..=arch.head_hidden.len() {
                let (out, a) = match arch.head_hidden.get(k) {
                    Some(&h) => (h, Some(act)),
                    None => (buckets, None),
                };
                rest.push(Dense::register(&mut layout, &format!("head{i}.dense{k}"), width, out, a));
                width = out;
            }
            heads.push(Head {
                prefix_len,
                embed_w: w,
                prefix_w: w + embed * first_out,
                bias,
                first_out,
                first_act: (!arch.head_hidden.is_empty()).then_some(act),
                rest,
            });
        }
        Self {
            layout,
            views,
            dense,
            heads,
            embed,
            buckets,
            resolution: arch.scene_resolution,
            depth_offset: arch.scene_depth_offset,
            depth_scale: arch.depth_scale,
        }
    }

    /// Names of the output-layer weights of each head.
    fn output_weights(&self) -> Vec<String> {
        (0..self.heads.len())
            .map(|i| format!("head{i}.dense{}.w", self.heads[i].rest.len()))
            .collect()
    }

    /// Encodes `n` scenes, each given as `scene_views` images.
    pub fn encode_batch<F: Real>(&self, p: &[F], scenes: &[&[DepthImage]]) -> Result<(Array2<F>, EncoderCache<F>), ModelError> {
        let n = scenes.len();
        let mut feats: Vec<Array2<F>> = Vec::with_capacity(self.views.len());
        let mut view_caches = Vec::with_capacity(self.views.len());
        for scene in scenes {
            if scene.len() != self.views.len() {
                return Err(ModelError::ViewCount {
                    expected: self.views.len(),
                    got: scene.len(),
                });
            }
        }
        for (v, convs) in self.views.iter().enumerate() {
            let imgs: Vec<&DepthImage> = scenes.iter().map(|s| &s[v]).collect();
            let x = image_tensor::<F>(&imgs, self.resolution, self.depth_offset, self.depth_scale)?;
            if convs.is_empty() {
                feats.push(Array2::from_shape_vec((n, self.resolution * self.resolution), x).expect("image rows"));
                view_caches.push(Vec::new());
            } else {
                let (rows, caches) = conv_stack_forward(convs, p, x, n);
                feats.push(rows);
                view_caches.push(caches);
            }
        }
        let views: Vec<ArrayView2<F>> = feats.iter().map(|f| f.view()).collect();
        let mut x = ndarray::concatenate(ndarray::Axis(1), &views).expect("equal row counts");
        let mut dense_in = Vec::new();
        let mut dense_out = Vec::new();
        for d in &self.dense {
            let y = d.forward(p, &x.view());
            dense_in.push(x);
            dense_out.push(y.clone());
            x = y;
        }
        Ok((
            x,
            EncoderCache {
                n,
                views: view_caches,
                dense_in,
                dense_out,
            },
        ))
    }

    pub fn encoder_backward<F: Real>(&self, p: &[F], grad: &mut [F], cache: &EncoderCache<F>, ds: Array2<F>) {
        let mut d = ds;
        for (k, layer) in self.dense.iter().enumerate().rev() {
            let need = k > 0 || self.views.iter().any(|v| !v.is_empty());
            match layer.backward(p, grad, &cache.dense_in[k].view(), &cache.dense_out[k], d, need) {
                Some(dx) => d = dx,
                None => return,
            }
        }
        let mut col = 0;
        for (v, convs) in self.views.iter().enumerate() {
            let width = conv_out_len(convs, self.resolution);
            let part = d.slice(s![.., col..col + width]);
            conv_stack_backward(convs, p, grad, &cache.views[v], &part, cache.n);
            col += width;
        }
    }

    /// Logits of head `i` for rows given by (scene index into `embeddings`, prefix).
    /// `prefixes` holds `rows × i` bucket indices.
    pub fn head_forward<F: Real>(
        &self,
        p: &[F],
        i: usize,
        embeddings: &Array2<F>,
        scene_of_row: &[usize],
        prefixes: &[u8],
    ) -> Result<(Array2<F>, HeadCache<F>), ModelError> {
        let head = &self.heads[i];
        let rows = scene_of_row.len();
        if prefixes.len() != rows * head.prefix_len {
            return Err(ModelError::PrefixLength {
                head: i,
                expected: rows * head.prefix_len,
                got: prefixes.len(),
            });
        }
        let h = head.first_out;
        let embed_part = embeddings.dot(&mat(p, head.embed_w, self.embed, h));
        let prefix_w = mat(p, head.prefix_w, self.buckets * head.prefix_len, h);
        let bias = &p[head.bias..head.bias + h];
        let mut first = Array2::<F>::zeros((rows, h));
        for (r, mut row) in first.rows_mut().into_iter().enumerate() {
            let src = embed_part.row(scene_of_row[r]);
            for k in 0..h {
                row[k] = src[k] + bias[k];
            }
            for (slot, &b) in prefixes[r * head.prefix_len..(r + 1) * head.prefix_len].iter().enumerate() {
                let w = prefix_w.row(slot * self.buckets + b as usize);
                for k in 0..h {
                    row[k] += w[k];
                }
            }
        }
        if let Some(a) = head.first_act {
            first.mapv_inplace(|v| a.apply(v));
        }
        let mut x = first.clone();
        let mut rest_in = Vec::with_capacity(head.rest.len());
        let mut rest_out = Vec::with_capacity(head.rest.len());
        for d in &head.rest {
            let y = d.forward(p, &x.view());
            rest_in.push(x);
            rest_out.push(y.clone());
            x = y;
        }
        Ok((
            x,
            HeadCache {
                head: i,
                scene_of_row: scene_of_row.to_vec(),
                prefixes: prefixes.to_vec(),
                first,
                rest_in,
                rest_out,
            },
        ))
    }

    /// Accumulates head parameter gradients and adds the embedding gradient into `ds`.
    pub fn head_backward<F: Real>(
        &self,
        p: &[F],
        grad: &mut [F],
        embeddings: &Array2<F>,
        cache: &HeadCache<F>,
        dlogits: Array2<F>,
        ds: &mut Array2<F>,
    ) {
        let head = &self.heads[cache.head];
        let mut d = dlogits;
        for (k, layer) in head.rest.iter().enumerate().rev() {
            d = layer
                .backward(p, grad, &cache.rest_in[k].view(), &cache.rest_out[k], d, true)
                .expect("input gradient requested");
        }
        if let Some(a) = head.first_act {
            d.zip_mut_with(&cache.first, |g, &y| *g *= a.grad_from_output(y));
        }
        let h = head.first_out;
        let n_scenes = embeddings.nrows();
        let mut d_embed_part = Array2::<F>::zeros((n_scenes, h));
        {
            let gb = &mut grad[head.bias..head.bias + h];
            for (r, row) in d.rows().into_iter().enumerate() {
                let mut dst = d_embed_part.row_mut(cache.scene_of_row[r]);
                for k in 0..h {
                    dst[k] += row[k];
                    gb[k] += row[k];
                }
            }
        }
        {
            let mut gp = mat_mut(grad, head.prefix_w, self.buckets * head.prefix_len, h);
            for (r, row) in d.rows().into_iter().enumerate() {
                let pre = &cache.prefixes[r * head.prefix_len..(r + 1) * head.prefix_len];
                for (slot, &b) in pre.iter().enumerate() {
                    let mut dst = gp.row_mut(slot * self.buckets + b as usize);
                    for k in 0..h {
                        dst[k] += row[k];
                    }
                }
            }
        }
        let mut gw = mat_mut(grad, head.embed_w, self.embed, h);
        ndarray::linalg::general_mat_mul(F::one(), &embeddings.t(), &d_embed_part, F::one(), &mut gw);
        let w = mat(p, head.embed_w, self.embed, h);
        ndarray::linalg::general_mat_mul(F::one(), &d_embed_part, &w.t(), F::one(), ds);
    }

    /// Log-softmax of head `i` for the given rows.
    pub fn head_log_probs<F: Real>(
        &self,
        p: &[F],
        i: usize,
        embeddings: &Array2<F>,
        scene_of_row: &[usize],
        prefixes: &[u8],
    ) -> Result<Array2<F>, ModelError> {
        let (logits, _) = self.head_forward(p, i, embeddings, scene_of_row, prefixes)?;
        Ok(log_softmax_rows(&logits))
    }
}

/// Grasp evaluator: conv stack on the hand image, dense layers, one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorNet {
    pub layout: Layout,
    pub convs: Vec<Conv>,
    pub dense: Vec<Dense>,
    resolution: usize,
    depth_offset: f64,
    depth_scale: f64,
}

pub struct EvaluatorCache<F> {
    n: usize,
    convs: Vec<ConvCache<F>>,
    dense_in: Vec<Array2<F>>,
    dense_out: Vec<Array2<F>>,
}

impl EvaluatorNet {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut layout = Layout::default();
        let convs = build_convs(&mut layout, "evaluator", &arch.evaluator_convs, arch.hand_resolution, arch.activation);
        let mut width = conv_out_len(&convs, arch.hand_resolution);
        let mut dense = Vec::new();
        let widths: Vec<usize> = arch.evaluator_hidden.iter().copied().chain([1]).collect();
        for (k, &out) in widths.iter().enumerate() {
            let last = k + 1 == widths.len();
            dense.push(Dense::register(
                &mut layout,
                &format!("evaluator.dense{k}"),
                width,
                out,
                (!last).then_some(arch.activation),
            ));
            width = out;
        }
        Self {
            layout,
            convs,
            dense,
            resolution: arch.hand_resolution,
            depth_offset: arch.hand_depth_offset,
            depth_scale: arch.depth_scale,
        }
    }

    /// Success logits for a batch of hand images.
    pub fn forward<F: Real>(&self, p: &[F], images: &[&DepthImage]) -> Result<(Vec<F>, EvaluatorCache<F>), ModelError> {
        let n = images.len();
        let x = image_tensor::<F>(images, self.resolution, self.depth_offset, self.depth_scale)?;
        let (mut cur, convs) = if self.convs.is_empty() {
            (
                Array2::from_shape_vec((n, self.resolution * self.resolution), x).expect("image rows"),
                Vec::new(),
            )
        } else {
            conv_stack_forward(&self.convs, p, x, n)
        };
        let mut dense_in = Vec::new();
        let mut dense_out = Vec::new();
        for d in &self.dense {
            let y = d.forward(p, &cur.view());
            dense_in.push(cur);
            dense_out.push(y.clone());
            cur = y;
        }
        Ok((
            cur.column(0).to_vec(),
            EvaluatorCache {
                n,
                convs,
                dense_in,
                dense_out,
            },
        ))
    }

    pub fn backward<F: Real>(&self, p: &[F], grad: &mut [F], cache: &EvaluatorCache<F>, dlogits: &[F]) {
        let mut d = Array2::from_shape_vec((cache.n, 1), dlogits.to_vec()).expect("one logit per image");
        for (k, layer) in self.dense.iter().enumerate().rev() {
            let need = k > 0 || !self.convs.is_empty();
            match layer.backward(p, grad, &cache.dense_in[k].view(), &cache.dense_out[k], d, need) {
                Some(dx) => d = dx,
                None => return,
            }
        }
        conv_stack_backward(&self.convs, p, grad, &cache.convs, &d.view(), cache.n);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Embedding `s` of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<F>(pub Vec<F>);

impl<F: Real> Embedding<F> {
    fn as_matrix(&self) -> Array2<F> {
        Array2::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row vector")
    }
}

/// Planner and evaluator parameters together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub arch: ArchConfig,
    pub planner_net: PlannerNet,
    pub evaluator_net: EvaluatorNet,
    pub planner: Vec<F>,
    pub evaluator: Vec<F>,
}

/// Scale applied to the initial output-layer weights so untrained heads start
/// close to uniform.
const OUTPUT_INIT_SCALE: f64 = 0.1;

pub fn init_params<F: Real, R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<ModelParams<F>, ModelError> {
    arch.validate()?;
    let planner_net = PlannerNet::new(arch);
    let evaluator_net = EvaluatorNet::new(arch);
    let mut planner: Vec<F> = planner_net.layout.init(rng, 1.0);
    let mut evaluator: Vec<F> = evaluator_net.layout.init(rng, 1.0);
    for name in planner_net.output_weights() {
        let t = planner_net.layout.find(&name).expect("output layer");
        for v in &mut planner[t.offset..t.offset + t.len()] {
            *v *= F::of(OUTPUT_INIT_SCALE);
        }
    }
    let last = evaluator_net.dense.last().expect("output layer");
    for v in &mut evaluator[last.w..last.w + last.inputs] {
        *v *= F::of(OUTPUT_INIT_SCALE);
    }
    Ok(ModelParams {
        arch: arch.clone(),
        planner_net,
        evaluator_net,
        planner,
        evaluator,
    })
}

impl<F: Real> ModelParams<F> {
    /// Same architecture, all parameters zero.
    pub fn zeros(arch: &ArchConfig) -> Result<Self, ModelError> {
        arch.validate()?;
        let planner_net = PlannerNet::new(arch);
        let evaluator_net = EvaluatorNet::new(arch);
        Ok(Self {
            arch: arch.clone(),
            planner: vec![F::zero(); planner_net.layout.len],
            evaluator: vec![F::zero(); evaluator_net.layout.len],
            planner_net,
            evaluator_net,
        })
    }

    pub fn spec(&self) -> &GraspSpec {
        &self.arch.grasp
    }

    pub fn is_finite(&self) -> bool {
        self.planner.iter().chain(&self.evaluator).all(|v| v.is_finite())
    }

    pub fn encode(&self, images: &[DepthImage]) -> Result<Embedding<F>, ModelError> {
        let (s, _) = self.planner_net.encode_batch(&self.planner, &[images])?;
        Ok(Embedding(s.row(0).to_vec()))
    }

    pub fn conditional_logits(&self, s: &Embedding<F>, prefix: &[u8], head: usize) -> Result<Vec<F>, ModelError> {
        if head >= self.planner_net.heads.len() || prefix.len() != head {
            return Err(ModelError::PrefixLength {
                head,
                expected: head,
                got: prefix.len(),
            });
        }
        let (logits, _) = self
            .planner_net
            .head_forward(&self.planner, head, &s.as_matrix(), &[0], prefix)?;
        Ok(logits.row(0).to_vec())
    }

    /// `Σ_i log softmax(head_i(s, g_<i))[g_i]`.
    pub fn grasp_log_prob(&self, s: &Embedding<F>, g: &Grasp) -> Result<F, ModelError> {
        Ok(self.grasp_log_probs(s, std::slice::from_ref(g))?[0])
    }

    pub fn grasp_log_probs(&self, s: &Embedding<F>, grasps: &[Grasp]) -> Result<Vec<F>, ModelError> {
        let n = self.spec().n();
        for g in grasps {
            if g.0.len() != n {
                return Err(ModelError::PrefixLength {
                    head: n,
                    expected: n,
                    got: g.0.len(),
                });
            }
        }
        let emb = s.as_matrix();
        let rows = vec![0usize; grasps.len()];
        let mut total = vec![F::zero(); grasps.len()];
        for i in 0..n {
            let prefixes: Vec<u8> = grasps.iter().flat_map(|g| g.0[..i].iter().copied()).collect();
            let lp = self.planner_net.head_log_probs(&self.planner, i, &emb, &rows, &prefixes)?;
            for (r, g) in grasps.iter().enumerate() {
                total[r] += lp[[r, g.0[i] as usize]];
            }
        }
        Ok(total)
    }

    /// Log-probabilities of every grasp, indexed by `GraspSpec::index_of`.
    pub fn full_log_distribution(&self, s: &Embedding<F>) -> Result<Vec<F>, ModelError> {
        let spec = self.spec();
        if spec.grasp_count() > MAX_ENUMERATION {
            return Err(ModelError::SpaceTooLarge(spec.grasp_count()));
        }
        let b = spec.buckets();
        let emb = s.as_matrix();
        let mut logp = vec![F::zero()];
        let mut prefixes: Vec<u8> = Vec::new();
        for i in 0..spec.n() {
            let rows = logp.len();
            let lp = self
                .planner_net
                .head_log_probs(&self.planner, i, &emb, &vec![0; rows], &prefixes)?;
            let mut next = Vec::with_capacity(rows * b);
            let mut next_prefixes = Vec::with_capacity(rows * b * (i + 1));
            for r in 0..rows {
                for c in 0..b {
                    next.push(logp[r] + lp[[r, c]]);
                    next_prefixes.extend_from_slice(&prefixes[r * i..(r + 1) * i]);
                    next_prefixes.push(c as u8);
                }
            }
            logp = next;
            prefixes = next_prefixes;
        }
        Ok(logp)
    }

    pub fn full_distribution(&self, s: &Embedding<F>) -> Result<Vec<F>, ModelError> {
        Ok(self.full_log_distribution(s)?.into_iter().map(|v| v.exp()).collect())
    }

    /// Success probabilities for hand images.
    pub fn evaluate_scores(&self, images: &[&DepthImage]) -> Result<Vec<f64>, ModelError> {
        let (logits, _) = self.evaluator_net.forward(&self.evaluator, images)?;
        Ok(logits.into_iter().map(|l| sigmoid(l.f64())).collect())
    }

    pub fn evaluate_score(&self, image: &DepthImage) -> Result<f64, ModelError> {
        Ok(self.evaluate_scores(&[image])?[0])
    }

    /// Parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            arch: self.arch.clone(),
            planner_net: self.planner_net.clone(),
            evaluator_net: self.evaluator_net.clone(),
            planner: self.planner.iter().map(|v| G::of(v.f64())).collect(),
            evaluator: self.evaluator.iter().map(|v| G::of(v.f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            scene_resolution: 16,
            hand_resolution: 8,
            encoder_convs: vec![ConvLayerSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            }],
            encoder_dense: vec![16],
            head_hidden: vec![12],
            evaluator_convs: vec![ConvLayerSpec {
                channels: 2,
                kernel: 3,
                stride: 2,
            }],
            evaluator_hidden: vec![8],
            ..ArchConfig::default()
        }
    }

    fn image(res: usize, seed: u64) -> DepthImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DepthImage {
            height: res,
            width: res,
            data: (0..res * res).map(|_| rng.random_range(0.4f32..0.5)).collect(),
        }
    }

    fn model(seed: u64) -> ModelParams<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        init_params(&small_arch(), &mut rng).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(model(3), model(3));
        assert_ne!(model(3).planner, model(4).planner);
    }

    #[test]
    fn default_arch_layout() {
        let m: ModelParams<f32> = init_params(&ArchConfig::default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.planner_net.embed, 64);
        assert_eq!(m.planner_net.heads.len(), 4);
        assert!(m.planner_net.layout.find("head3.dense0.w").unwrap().shape == vec![64 + 60, 64]);
        assert!(m.planner_net.layout.find("head0.dense2.w").unwrap().shape == vec![64, 20]);
        assert!(m.evaluator_net.layout.find("evaluator.dense1.w").unwrap().shape == vec![64, 1]);
    }

    #[test]
    fn fresh_heads_are_near_uniform() {
        let m: ModelParams<f64> = init_params(&ArchConfig::default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = m.encode(&[image(64, 1)]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for head in 0..4 {
            let prefix: Vec<u8> = (0..head).map(|_| rng.random_range(0..20)).collect();
            let logits = m.conditional_logits(&s, &prefix, head).unwrap();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            let entropy: f64 = logits.iter().map(|v| -(v - lse).exp() * (v - lse)).sum();
            assert!(entropy >= 0.95 * 20f64.ln(), "head {head}: {entropy}");
        }
    }

    #[test]
    fn zero_hidden_heads_are_linear() {
        let arch = ArchConfig {
            head_hidden: vec![],
            ..small_arch()
        };
        let m: ModelParams<f64> = init_params(&arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = m.encode(&[image(16, 0)]).unwrap();
        let total: f64 = m.full_distribution(&s).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encoder_edge_cases() {
        let m = model(0);
        let zero = DepthImage::filled(16, 16, 0.0);
        let s = m.encode(std::slice::from_ref(&zero)).unwrap();
        assert!(s.0.iter().all(|v| v.is_finite()));
        let img = image(16, 5);
        assert_eq!(m.encode(std::slice::from_ref(&img)).unwrap(), m.encode(std::slice::from_ref(&img)).unwrap());
        let mut bumped = img.clone();
        bumped.data[5 * 16 + 7] += 0.1;
        assert_ne!(m.encode(&[img]).unwrap(), m.encode(&[bumped]).unwrap());
        assert!(matches!(m.encode(&[image(8, 0)]), Err(ModelError::ImageShape { .. })));
    }

    #[test]
    fn conditional_logits_contracts() {
        let m = model(1);
        let s = m.encode(&[image(16, 1)]).unwrap();
        assert!(m.conditional_logits(&s, &[1], 2).is_err());
        let a = m.conditional_logits(&s, &[1, 2], 2).unwrap();
        let b = m.conditional_logits(&s, &[1, 3], 2).unwrap();
        assert_ne!(a, b);
        let zero = ModelParams::<f64>::zeros(&small_arch()).unwrap();
        let s0 = zero.encode(&[image(16, 1)]).unwrap();
        let lp = zero.grasp_log_prob(&s0, &Grasp(vec![1, 2, 3, 4])).unwrap();
        assert!((lp + 4.0 * 20f64.ln()).abs() < 1e-12);
        assert!((lp + 11.9829).abs() < 1e-4);
    }

    #[test]
    fn log_prob_matches_enumeration_and_marginal() {
        let m = model(2);
        let s = m.encode(&[image(16, 2)]).unwrap();
        let logp = m.full_log_distribution(&s).unwrap();
        let spec = *m.spec();
        let total: f64 = logp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        for idx in [0u64, 7, 12345, 159_999] {
            let g = spec.grasp_at(idx);
            assert!((m.grasp_log_prob(&s, &g).unwrap() - logp[idx as usize]).abs() < 1e-10);
        }
        let head0 = m.conditional_logits(&s, &[], 0).unwrap();
        let lse = head0.iter().map(|v| v.exp()).sum::<f64>().ln();
        for b in 0..20 {
            let marginal: f64 = logp[b * 8000..(b + 1) * 8000].iter().map(|v| v.exp()).sum();
            assert!((marginal - (head0[b] - lse).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn enumeration_refuses_large_spaces() {
        let arch = ArchConfig {
            grasp: GraspSpec::new(6, 20).unwrap(),
            ..small_arch()
        };
        let m: ModelParams<f64> = init_params(&arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = m.encode(&[image(16, 0)]).unwrap();
        assert_eq!(m.full_distribution(&s), Err(ModelError::SpaceTooLarge(64_000_000)));
    }

    #[test]
    fn evaluator_scores() {
        let zero = ModelParams::<f64>::zeros(&small_arch()).unwrap();
        assert_eq!(zero.evaluate_score(&image(8, 0)).unwrap(), 0.5);
        let m = model(4);
        for k in 0..1000 {
            let v = m.evaluate_score(&image(8, k)).unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
