//! A compact two-level soft-correspondence registration network with a
//! hand-written reverse pass, Adam, and a binary checkpoint format.
//!
//! Each level embeds both clouds with a shared point MLP over k-NN offsets
//! (max-pooled), scores candidate matches with a small pair MLP minus a
//! learned distance penalty, and decodes a displacement from the
//! similarity-weighted offset, its neighbourhood mean and (coarse level) its
//! least-squares affine part. The coarse level runs on a farthest-point
//! subsample with k-NN candidates; its field is upsampled with Gaussian
//! weights, and the fine level refines it by matching inside a ball around
//! every warped moving point.

mod checkpoint;
mod optim;
pub mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{Activation, Matrix, NodeId, Tape};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist2, DisplacementField, GaussianWeights, NeighborIndex, PointCloud, TieBreak, Vec3};
use tape::{Candidates, CorrelateInputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Neighbourhood size for point features and decoder smoothing.
    pub k: usize,
    /// Feature width of every hidden layer.
    pub width: usize,
    /// 1 (single global level on the full cloud) or 2 (coarse + fine).
    pub scales: usize,
    /// Farthest-point sample size of the coarse level.
    pub coarse_points: usize,
    /// Fixed-cloud candidates per coarse moving point.
    pub coarse_candidates: usize,
    /// Length unit of the coarse level (mm).
    pub coarse_scale: f64,
    /// Match radius of the fine level (mm).
    pub fine_radius: f64,
    /// Gaussian width used to upsample the coarse field (mm).
    pub upsample_sigma: f64,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 8,
            width: 16,
            scales: 2,
            coarse_points: 256,
            coarse_candidates: 32,
            coarse_scale: 10.0,
            fine_radius: 6.0,
            upsample_sigma: 4.0,
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 || self.width == 0 || self.coarse_points == 0 || self.coarse_candidates == 0 {
            return bad("model k, width, coarse_points and coarse_candidates must be >= 1");
        }
        if !(self.scales == 1 || self.scales == 2) {
            return bad("model scales must be 1 or 2");
        }
        for (name, v) in [
            ("coarse_scale", self.coarse_scale),
            ("fine_radius", self.fine_radius),
            ("upsample_sigma", self.upsample_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("model {name} must be > 0")));
            }
        }
        Ok(())
    }

    /// Stable hash of the fields that determine the parameter layout.
    pub fn layout_hash(&self) -> u64 {
        // FNV-1a over the layout-defining integers
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [self.width as u64, self.scales as u64] {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Offsets of one level's tensors inside the flat parameter vector.
///
/// Per level, in order (row-major, `C` = width):
/// `feat1.w 3xC, feat1.b C, feat2.w CxC, feat2.b C, pair_a.w CxC, pair_a.b C,
/// pair_b.w CxC, pair_d.w 3xC, pair_v C, beta 1, [dust 1, fine only],
/// dec.w (4C+6)xC, dec.b C, out.w (C+9|C+6)x3, out.b 3`.
/// The coarse (or only) level comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LevelLayout {
    feat1_w: usize,
    feat1_b: usize,
    feat2_w: usize,
    feat2_b: usize,
    pair_a_w: usize,
    pair_a_b: usize,
    pair_b_w: usize,
    pair_d_w: usize,
    pair_v: usize,
    beta: usize,
    dust: Option<usize>,
    dec_w: usize,
    dec_b: usize,
    out_w: usize,
    out_b: usize,
    out_in: usize,
    end: usize,
}

impl LevelLayout {
    fn new(start: usize, c: usize, fine: bool) -> Self {
        let mut off = start;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let feat1_w = take(3 * c);
        let feat1_b = take(c);
        let feat2_w = take(c * c);
        let feat2_b = take(c);
        let pair_a_w = take(c * c);
        let pair_a_b = take(c);
        let pair_b_w = take(c * c);
        let pair_d_w = take(3 * c);
        let pair_v = take(c);
        let beta = take(1);
        let dust = fine.then(|| take(1));
        let dec_w = take((4 * c + 6) * c);
        let dec_b = take(c);
        let out_in = if fine { c + 6 } else { c + 9 };
        let out_w = take(out_in * 3);
        let out_b = take(3);
        Self {
            feat1_w,
            feat1_b,
            feat2_w,
            feat2_b,
            pair_a_w,
            pair_a_b,
            pair_b_w,
            pair_d_w,
            pair_v,
            beta,
            dust,
            dec_w,
            dec_b,
            out_w,
            out_b,
            out_in,
            end: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    levels: Vec<LevelLayout>,
    width: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.width;
        let coarse = LevelLayout::new(0, c, false);
        let mut levels = vec![coarse];
        if cfg.scales == 2 {
            levels.push(LevelLayout::new(coarse.end, c, true));
        }
        Self { levels, width: c }
    }

    pub fn len(&self) -> usize {
        self.levels.last().map_or(0, |l| l.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ranges of the final decoder maps, zero at initialization.
    pub fn output_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.levels.iter().map(|l| l.out_w..l.end).collect()
    }
}

/// Flat parameter vector of the registration model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    values: Vec<f64>,
}

impl ModelParameters {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { values })
    }

    /// Seeded fan-in uniform init; decoder output maps are zero, so the fresh
    /// model predicts the identity registration.
    pub fn init(cfg: &ModelConfig) -> Self {
        let layout = Layout::new(cfg);
        let c = cfg.width;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut values = vec![0.0; layout.len()];
        for l in &layout.levels {
            let mut fill = |start: usize, n: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
                let b = 1.0 / (fan_in as f64).sqrt();
                for v in &mut values[start..start + n] {
                    *v = rng.random_range(-b..b);
                }
            };
            fill(l.feat1_w, 3 * c, 3, &mut rng);
            fill(l.feat1_b, c, 3, &mut rng);
            fill(l.feat2_w, c * c, c, &mut rng);
            fill(l.feat2_b, c, c, &mut rng);
            fill(l.pair_a_w, c * c, c, &mut rng);
            fill(l.pair_a_b, c, c, &mut rng);
            fill(l.pair_b_w, c * c, c, &mut rng);
            fill(l.pair_d_w, 3 * c, 3, &mut rng);
            fill(l.pair_v, c, c, &mut rng);
            fill(l.dec_w, (4 * c + 6) * c, 4 * c + 6, &mut rng);
            fill(l.dec_b, c, 4 * c + 6, &mut rng);
            values[l.beta] = 1.0;
        }
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Layout::new(cfg).len();
        if self.len() != expected {
            return Err(Error::LayoutMismatch {
                expected,
                got: self.len(),
            });
        }
        Ok(())
    }
}

/// Farthest-point sample of `n` indices. Starts from the lexicographically
/// smallest point; ties go to the lexicographically smaller point, so the
/// selected point sequence does not depend on input order.
pub fn farthest_point_sample(points: &[Vec3], n: usize) -> Vec<usize> {
    let n = n.min(points.len());
    if n == 0 {
        return Vec::new();
    }
    let lex_less = |a: usize, b: usize| lex(&points[a], &points[b]) == std::cmp::Ordering::Less;
    let mut start = 0;
    for i in 1..points.len() {
        if lex_less(i, start) {
            start = i;
        }
    }
    let mut d = vec![f64::INFINITY; points.len()];
    let mut chosen = vec![start];
    let mut last = start;
    while chosen.len() < n {
        let mut best = usize::MAX;
        for i in 0..points.len() {
            let di = d[i].min(dist2(&points[i], &points[last]));
            d[i] = di;
            if best == usize::MAX || di > d[best] || (di == d[best] && lex_less(i, best)) {
                best = i;
            }
        }
        chosen.push(best);
        last = best;
    }
    chosen
}

fn lex(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

/// Orthonormal basis of the columns `[x, y, z, 1]`, dropping dependent ones.
fn affine_basis(points: &[Vec3]) -> Matrix {
    let n = points.len();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let raw: Vec<Vec<f64>> = (0..4)
        .map(|a| points.iter().map(|p| if a == 3 { 1.0 } else { p[a] }).collect())
        .collect();
    // column 3 first so the constant direction is always kept
    for a in [3, 0, 1, 2] {
        let mut v = raw[a].clone();
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // two Gram-Schmidt passes for stability
        for _ in 0..2 {
            for q in &cols {
                let dot: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 * scale.max(1e-300) && norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
            cols.push(v);
        }
    }
    let r = cols.len();
    let mut m = Matrix::zeros(n, r);
    for (a, q) in cols.iter().enumerate() {
        for (i, v) in q.iter().enumerate().take(n) {
            m.data[i * r + a] = *v;
        }
    }
    m
}

/// Relative k-NN offsets of a cloud and the flat neighbour list.
#[derive(Debug, Clone)]
struct Neighbourhood {
    k: usize,
    offsets: Matrix,
    flat: Vec<usize>,
}

impl Neighbourhood {
    fn new(points: &[Vec3], k: usize, scale: f64) -> Self {
        let index = NeighborIndex::build_with(&PointCloud::new(points.to_vec()).expect("finite points"), TieBreak::Coordinates);
        let k = k.min(points.len());
        let mut flat = Vec::with_capacity(points.len() * k);
        let mut off = Vec::with_capacity(points.len() * k * 3);
        let inv = 1.0 / scale;
        for p in points {
            for n in index.knn(p, k) {
                let q = points[n.index];
                off.extend_from_slice(&[(q[0] - p[0]) * inv, (q[1] - p[1]) * inv, (q[2] - p[2]) * inv]);
                flat.push(n.index);
            }
        }
        Self {
            k,
            offsets: Matrix::from_vec(points.len() * k, 3, off),
            flat,
        }
    }
}

#[derive(Debug, Clone)]
struct CoarsePlan {
    moving_idx: Vec<usize>,
    moving: Vec<Vec3>,
    fixed: Arc<Vec<Vec3>>,
    nb_m: Neighbourhood,
    nb_f: Neighbourhood,
    candidates: Candidates,
    basis: Arc<Matrix>,
    // coarse-to-full Gaussian upsampling, two-scale only
    upsample: Option<Arc<SparseRows>>,
}

#[derive(Debug, Clone)]
struct FinePlan {
    moving: Vec<Vec3>,
    fixed: Arc<Vec<Vec3>>,
    fixed_index: Arc<NeighborIndex>,
    nb_m: Neighbourhood,
    nb_f: Neighbourhood,
}

/// Everything about a (moving, fixed) pair that does not depend on the
/// parameters. Reusable across forward passes on the same pair.
/// Per-row `(column, weight)` lists.
type SparseRows = Vec<Vec<(usize, f64)>>;

#[derive(Debug, Clone)]
pub struct Plan {
    cfg: ModelConfig,
    n_moving: usize,
    coarse: CoarsePlan,
    fine: Option<FinePlan>,
}

impl Plan {
    pub fn new(moving: &PointCloud, fixed: &PointCloud, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, f) = (moving.points(), fixed.points());
        let two = cfg.scales == 2;
        let (ic, jc) = if two {
            (farthest_point_sample(m, cfg.coarse_points), farthest_point_sample(f, cfg.coarse_points))
        } else {
            ((0..m.len()).collect(), (0..f.len()).collect())
        };
        let mc: Vec<Vec3> = ic.iter().map(|&i| m[i]).collect();
        let fc: Vec<Vec3> = jc.iter().map(|&j| f[j]).collect();
        let fc_index = NeighborIndex::build_with(&PointCloud::new(fc.clone())?, TieBreak::Coordinates);
        let candidates = Candidates::from_lists(mc.iter().map(|p| fc_index.query(p, cfg.coarse_candidates)));
        let upsample = if two {
            Some(Arc::new(GaussianWeights::new(&mc, m, cfg.upsample_sigma)?.into_rows()))
        } else {
            None
        };
        let coarse = CoarsePlan {
            nb_m: Neighbourhood::new(&mc, cfg.k, cfg.coarse_scale),
            nb_f: Neighbourhood::new(&fc, cfg.k, cfg.coarse_scale),
            basis: Arc::new(affine_basis(&mc)),
            moving_idx: ic,
            moving: mc,
            fixed: Arc::new(fc),
            candidates,
            upsample,
        };
        let fine = two.then(|| FinePlan {
            moving: m.to_vec(),
            fixed: Arc::new(f.to_vec()),
            fixed_index: Arc::new(NeighborIndex::build_with(fixed, TieBreak::Coordinates)),
            nb_m: Neighbourhood::new(m, cfg.k, cfg.fine_radius),
            nb_f: Neighbourhood::new(f, cfg.k, cfg.fine_radius),
        });
        Ok(Self {
            cfg: cfg.clone(),
            n_moving: m.len(),
            coarse,
            fine,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Indices into the moving cloud of the coarse level's points (two-scale only).
    pub fn coarse_indices(&self) -> Option<&[usize]> {
        self.fine.as_ref().map(|_| self.coarse.moving_idx.as_slice())
    }
}

/// Model output on one pair plus handles to the recorded output nodes.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub phi: DisplacementField,
    /// Coarse-level field on `Plan::coarse_indices`, two-scale only.
    pub coarse: Option<DisplacementField>,
    pub phi_node: NodeId,
    pub coarse_node: Option<NodeId>,
}

struct LevelInputs<'a> {
    lay: &'a LevelLayout,
    nb_m: &'a Neighbourhood,
    nb_f: &'a Neighbourhood,
    fixed: Arc<Vec<Vec3>>,
    pos: NodeId,
    candidates: Candidates,
    scale: f64,
    affine: Option<Arc<Matrix>>,
}

fn linear(t: &mut Tape, p: &[f64], x: NodeId, w: usize, b: Option<usize>, fan_in: usize, c: usize) -> NodeId {
    let wn = t.param(p, w, fan_in, c);
    let y = t.matmul(x, wn);
    match b {
        Some(b) => {
            let bn = t.param(p, b, 1, c);
            t.add_bias(y, bn)
        }
        None => y,
    }
}

fn point_features(t: &mut Tape, p: &[f64], lay: &LevelLayout, nb: &Neighbourhood, c: usize, act: Activation) -> NodeId {
    let x = t.constant(nb.offsets.clone());
    let h = linear(t, p, x, lay.feat1_w, Some(lay.feat1_b), 3, c);
    let h = t.act(h, act);
    let h = linear(t, p, h, lay.feat2_w, Some(lay.feat2_b), c, c);
    let h = t.act(h, act);
    t.max_pool(h, nb.k)
}

/// One level; returns the displacement in mm.
fn level(t: &mut Tape, p: &[f64], c: usize, act: Activation, li: LevelInputs) -> NodeId {
    let lay = li.lay;
    let h = point_features(t, p, lay, li.nb_m, c, act);
    let g = point_features(t, p, lay, li.nb_f, c, act);
    let ah = linear(t, p, h, lay.pair_a_w, Some(lay.pair_a_b), c, c);
    let bg = linear(t, p, g, lay.pair_b_w, None, c, c);
    let inputs = CorrelateInputs {
        ah,
        bg,
        pos: li.pos,
        d: t.param(p, lay.pair_d_w, 3, c),
        v: t.param(p, lay.pair_v, c, 1),
        beta: t.param(p, lay.beta, 1, 1),
        dust: lay.dust.map(|o| t.param(p, o, 1, 1)),
    };
    let corr = t.correlate(inputs, li.fixed, li.candidates, li.scale, act);
    let flow = t.slice_cols(corr, c, c + 3);
    let z = t.concat(&[h, corr]);
    let zn = t.gather(z, li.nb_m.flat.clone());
    let zb = t.mean_pool(zn, li.nb_m.k);
    let zz = t.concat(&[z, zb]);
    let q = linear(t, p, zz, lay.dec_w, Some(lay.dec_b), 4 * c + 6, c);
    let q = t.act(q, act);
    let zb_flow = t.slice_cols(zb, 2 * c, 2 * c + 3);
    let head = match li.affine {
        Some(basis) => {
            let aff = t.project(flow, basis);
            t.concat(&[q, flow, zb_flow, aff])
        }
        None => t.concat(&[q, flow, zb_flow]),
    };
    let out = linear(t, p, head, lay.out_w, Some(lay.out_b), lay.out_in, 3);
    t.scale(out, li.scale)
}

/// Predict the displacement of `plan`'s moving cloud, recording a tape.
pub fn forward(params: &ModelParameters, plan: &Plan) -> Result<(Prediction, Tape)> {
    let cfg = &plan.cfg;
    params.check_layout(cfg)?;
    let layout = Layout::new(cfg);
    let (c, act) = (cfg.width, cfg.activation);
    let p = params.values();
    let mut t = Tape::new(params.len());

    let cp = &plan.coarse;
    let pos_c = t.constant(Matrix::from_points(&cp.moving));
    let phi_c = level(
        &mut t,
        p,
        c,
        act,
        LevelInputs {
            lay: &layout.levels[0],
            nb_m: &cp.nb_m,
            nb_f: &cp.nb_f,
            fixed: cp.fixed.clone(),
            pos: pos_c,
            candidates: cp.candidates.clone(),
            scale: cfg.coarse_scale,
            affine: Some(cp.basis.clone()),
        },
    );
    let Some(fp) = &plan.fine else {
        let phi = DisplacementField::new(t.value(phi_c).to_points())?;
        return Ok((
            Prediction {
                phi,
                coarse: None,
                phi_node: phi_c,
                coarse_node: None,
            },
            t,
        ));
    };

    let up = t.sparse(phi_c, cp.upsample.clone().expect("two-scale plan has upsampling"));
    let m0 = t.constant(Matrix::from_points(&fp.moving));
    let warped = t.add(m0, up);
    let r = cfg.fine_radius;
    let mut scratch = Vec::new();
    let lists: Vec<Vec<usize>> = t
        .value(warped)
        .to_points()
        .iter()
        .map(|q| {
            scratch.clear();
            fp.fixed_index.within_unsorted(q, r * r, &mut scratch);
            let mut l: Vec<usize> = scratch.iter().filter(|n| n.dist2 < r * r).map(|n| n.index).collect();
            l.sort_unstable();
            l
        })
        .collect();
    let phi_f = level(
        &mut t,
        p,
        c,
        act,
        LevelInputs {
            lay: &layout.levels[1],
            nb_m: &fp.nb_m,
            nb_f: &fp.nb_f,
            fixed: fp.fixed.clone(),
            pos: warped,
            candidates: Candidates::from_lists(lists),
            scale: r,
            affine: None,
        },
    );
    let phi = t.add(up, phi_f);
    debug_assert_eq!(t.value(phi).rows, plan.n_moving);
    Ok((
        Prediction {
            phi: DisplacementField::new(t.value(phi).to_points())?,
            coarse: Some(DisplacementField::new(t.value(phi_c).to_points())?),
            phi_node: phi,
            coarse_node: Some(phi_c),
        },
        t,
    ))
}

/// Convenience: plan and run without keeping the tape.
pub fn predict(params: &ModelParameters, moving: &PointCloud, fixed: &PointCloud, cfg: &ModelConfig) -> Result<DisplacementField> {
    let plan = Plan::new(moving, fixed, cfg)?;
    Ok(forward(params, &plan)?.0.phi)
}
