//! The full network: texture, teacher and student branches, category
//! guidance, aggregation and the three matching stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use distillmatch_tensor::{io, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cefg::{loss_ce, pair_targets, Cefg, CefgOutput};
use crate::config::ModelConfig;
use crate::distill::{loss_kd, DistillWeights};
use crate::error::{Error, Result};
use crate::feature_nets::{Teacher, TextureNet, TexturePyramid, Vit, TEACHER_PREFIX};
use crate::geometry::{from_rows, invert, Mat3};
use crate::matcher::{
    apply_offsets, coarse_matches, Cmm, fine_matches, fine_point, fine_window, CmmOutput, CoarseMatch, FineInputs, FineMatch, Fmm, Grid,
    Match, Srm, FINE_TOKENS,
};
use crate::nn::Builder;
use crate::stfa::{Stfa, StfaOutput};
use crate::supervision::{
    build_gt_assignment, fine_gt_batch, loss_coarse, loss_fine, loss_reprojection, loss_subpixel, total_loss, CoarseLossWeights,
    LossTerms, LossWeights,
};
use crate::synthdata::GroundTruth;

/// Upper bound on coarse windows supervised at the fine level per pair.
pub const MAX_FINE_TRAIN: usize = 16;

#[derive(Clone, Debug)]
pub struct DistillMatch {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub texture: TextureNet,
    pub teacher: Teacher,
    pub student: Vit,
    pub cefg: Cefg,
    pub stfa: Stfa,
    pub cmm: Cmm,
    pub fmm: Fmm,
    pub srm: Srm,
}

/// Intermediate features of a stacked `[2, 3, H, W]` pair.
#[derive(Clone, Copy, Debug)]
pub struct PairFeatures {
    pub pyramid: TexturePyramid,
    pub student: Var,
    pub cefg: CefgOutput,
    pub stfa: StfaOutput,
    pub cmm: CmmOutput,
    pub fine: FineInputs,
    pub grid: Grid,
}

/// Loss graph of one training pair.
#[derive(Clone, Debug)]
pub struct PairLosses {
    pub terms: LossTerms,
    pub total: Var,
    pub logits: Var,
    pub gt_coarse: usize,
    pub fine_windows: usize,
    pub sub_matches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOutput {
    pub coarse: Vec<CoarseMatch>,
    pub fine: Vec<FineMatch>,
    pub matches: Vec<Match>,
}

/// `[3, H, W]` visible and `[1, H, W]` infrared stacked to `[2, 3, H, W]`.
pub fn stack_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
        return Err(Error::Dimension(format!("pair images {sa:?} and {sb:?}")));
    }
    let rgb = |t: &Tensor| -> Result<Vec<f64>> {
        match t.shape()[0] {
            3 => Ok(t.data().to_vec()),
            1 => Ok(t.data().repeat(3)),
            c => Err(Error::Dimension(format!("{c} channels; expected 1 or 3"))),
        }
    };
    let mut data = rgb(a)?;
    data.extend(rgb(b)?);
    Ok(Tensor::new(&[2, 3, sa[1], sa[2]], data)?)
}

impl DistillMatch {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let teacher = Teacher::new(&mut store, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, "");
        let texture = TextureNet::new(&mut b, &cfg);
        let student = Vit::new(&mut b, "student", &cfg.student, cfg.c4());
        let cefg = Cefg::new(&mut b, &cfg);
        let stfa = Stfa::new(&mut b, &cfg);
        let cmm = Cmm::new(&mut b, &cfg);
        let fmm = Fmm::new(&mut b, &cfg);
        let srm = Srm::new(&mut b, &cfg);
        Ok(Self {
            cfg,
            store,
            texture,
            teacher,
            student,
            cefg,
            stfa,
            cmm,
            fmm,
            srm,
        })
    }

    /// Everything up to the coarse matcher for a stacked pair.
    pub fn features(&self, g: &mut Graph, img: Var) -> Result<PairFeatures> {
        let s = g.shape(img).to_vec();
        if s.len() != 4 || s[0] != 2 || s[1] != 3 {
            return Err(Error::Dimension(format!("expected a stacked pair [2, 3, H, W], got {s:?}")));
        }
        self.cfg.check_image(s[2], s[3])?;
        let p = &self.store;
        let pyramid = self.texture.forward(g, p, img)?;
        let student = self.student.forward(g, p, img)?;
        let cefg = self.cefg.forward(g, p, pyramid.half, pyramid.eighth)?;
        let stfa = if self.cfg.hierarchical {
            let f_s_half = g.resize_bilinear(student, s[2] / 2, s[3] / 2)?;
            self.stfa
                .forward_hierarchical(g, p, f_s_half, pyramid.half, pyramid.quarter, cefg.fused)?
        } else {
            self.stfa.forward(g, p, student, cefg.fused)?
        };
        let half = stfa.half.unwrap_or(pyramid.half);
        let quarter = stfa.quarter.unwrap_or(pyramid.quarter);
        let e_a = g.narrow(stfa.eighth, 0, 0, 1)?;
        let e_b = g.narrow(stfa.eighth, 0, 1, 1)?;
        let cmm = self.cmm.forward(g, p, e_a, e_b)?;
        let fine = FineInputs {
            half_a: g.narrow(half, 0, 0, 1)?,
            half_b: g.narrow(half, 0, 1, 1)?,
            quarter_a: g.narrow(quarter, 0, 0, 1)?,
            quarter_b: g.narrow(quarter, 0, 1, 1)?,
            coarse_a: cmm.feat_a,
            coarse_b: cmm.feat_b,
        };
        Ok(PairFeatures {
            pyramid,
            student,
            cefg,
            stfa,
            cmm,
            fine,
            grid: Grid::new(s[2] / 8, s[3] / 8),
        })
    }

    /// Modality logits `[2, 2]` of a visible/infrared pair.
    pub fn modality_logits(&self, vis: &Tensor, pir: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let img = g.constant(stack_pair(vis, pir)?);
        let pyr = self.texture.forward(&mut g, &self.store, img)?;
        let enc = self.cefg.encode(&mut g, &self.store, pyr.half)?;
        let logits = self.cefg.classify(&mut g, &self.store, enc.token)?;
        Ok(g.value(logits).clone())
    }

    /// Teacher features of a stacked pair, bound as constants.
    pub fn teacher_features(&self, g: &mut Graph, img: Var) -> Result<Var> {
        self.teacher.forward(g, &self.store, img)
    }

    /// Builds every loss term for one pair.
    pub fn losses(
        &self,
        g: &mut Graph,
        vis: &Tensor,
        pir: &Tensor,
        gt: &GroundTruth,
        weights: &LossWeights,
        coarse_w: &CoarseLossWeights,
        distill_w: &DistillWeights,
    ) -> Result<PairLosses> {
        let img = g.constant(stack_pair(vis, pir)?);
        let f = self.features(g, img)?;
        let tea = self.teacher_features(g, img)?;
        let kd = loss_kd(g, tea, f.student, distill_w)?.total;
        let ce = loss_ce(g, f.cefg.logits, &pair_targets())?;
        let h = gt.homography();
        let assign = build_gt_assignment(&h, f.grid, f.grid)?;
        let coarse = loss_coarse(g, f.cmm.p0, f.cmm.p1, &assign, coarse_w)?;
        let pairs = spread(&assign.pairs, MAX_FINE_TRAIN);
        let fmm = self.fmm.forward(g, &self.store, &f.fine, &pairs, f.grid)?;
        let fine_t = fine_gt_batch(&h, f.grid, &pairs)?;
        let fine = loss_fine(g, fmm.map(|o| o.pf), &fine_t, coarse_w)?;
        let mut sub_matches = 0;
        let sub = match fmm {
            Some(o) => {
                let picks = pick_fine_positives(&fine_t, &pairs, f.grid);
                sub_matches = picks.len();
                if picks.is_empty() {
                    g.scalar(0.0)
                } else {
                    let rows: Vec<usize> = picks.iter().map(|p| p.0).collect();
                    let offsets = self.srm.forward(g, &self.store, o.fa, o.fb)?;
                    let offsets = g.index_select(offsets, 0, &rows)?;
                    let base_a: Vec<f64> = picks.iter().flat_map(|p| p.1).collect();
                    let base_b: Vec<f64> = picks.iter().flat_map(|p| p.2).collect();
                    let m = picks.len();
                    let ba = g.constant(Tensor::new(&[m, 2], base_a)?);
                    let bb = g.constant(Tensor::new(&[m, 2], base_b)?);
                    let da = g.narrow(offsets, 1, 0, 2)?;
                    let db = g.narrow(offsets, 1, 2, 2)?;
                    let xa = g.add(ba, da)?;
                    let xb = g.add(bb, db)?;
                    subpixel_term(g, xa, xb, gt, vis.shape()[2])?
                }
            }
            None => g.scalar(0.0),
        };
        let terms = LossTerms {
            kd,
            ce,
            coarse,
            fine,
            sub,
        };
        let total = total_loss(g, &terms, weights)?;
        Ok(PairLosses {
            terms,
            total,
            logits: f.cefg.logits,
            gt_coarse: assign.pairs.len(),
            fine_windows: pairs.len(),
            sub_matches,
        })
    }

    /// Matches two `[C, H, W]` images (`C` is 1 or 3).
    pub fn match_images(&self, a: &Tensor, b: &Tensor) -> Result<MatchOutput> {
        let mut g = Graph::new();
        let img = g.constant(stack_pair(a, b)?);
        let f = self.features(&mut g, img)?;
        let th = self.cfg.thresholds;
        let coarse = coarse_matches(g.value(f.cmm.sim), g.value(f.cmm.p0), g.value(f.cmm.p1), th.theta_c)?;
        let pairs: Vec<(usize, usize)> = coarse.iter().map(|m| (m.a, m.b)).collect();
        let Some(o) = self.fmm.forward(&mut g, &self.store, &f.fine, &pairs, f.grid)? else {
            return Ok(MatchOutput {
                coarse,
                ..Default::default()
            });
        };
        let fine = fine_matches(g.value(o.pf), &pairs, f.grid, th.theta_f)?;
        if fine.is_empty() {
            return Ok(MatchOutput {
                coarse,
                fine,
                matches: Vec::new(),
            });
        }
        let offsets = self.srm.forward(&mut g, &self.store, o.fa, o.fb)?;
        let rows: Vec<usize> = fine.iter().map(|m| m.coarse).collect();
        let offsets = g.index_select(offsets, 0, &rows)?;
        let matches = apply_offsets(&fine, g.value(offsets));
        Ok(MatchOutput { coarse, fine, matches })
    }

    /// Checkpoint directory: one DMT1 file per trainable-branch parameter, a
    /// manifest of name, file and shape, and the model config. Teacher
    /// weights are regenerated from the configured seed on load.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = BTreeMap::new();
        for e in self.store.entries() {
            if e.name.starts_with(TEACHER_PREFIX) {
                continue;
            }
            let file = format!("{}.tensor", e.name);
            io::save(dir.join(&file), &e.value)?;
            manifest.insert(
                e.name.clone(),
                ManifestEntry {
                    file,
                    shape: e.value.shape().to_vec(),
                },
            );
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut model = Self::new(cfg, 0)?;
        let expected = model
            .store
            .entries()
            .iter()
            .filter(|e| !e.name.starts_with(TEACHER_PREFIX))
            .count();
        if expected != manifest.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, model has {expected}",
                manifest.len()
            )));
        }
        for (name, entry) in &manifest {
            let id = model.store.id(name)?;
            let t = io::load(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!("{name}: file shape {:?} vs manifest {:?}", t.shape(), entry.shape)));
            }
            model.store.set(id, t)?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

/// Up to `k` items spread evenly over `v`.
pub fn spread<T: Copy>(v: &[T], k: usize) -> Vec<T> {
    if v.len() <= k {
        return v.to_vec();
    }
    (0..k).map(|i| v[i * v.len() / k]).collect()
}

/// One positive per window, preferring the window centre: `(row, pa, pb)`.
fn pick_fine_positives(gt: &Tensor, pairs: &[(usize, usize)], grid: Grid) -> Vec<(usize, [f64; 2], [f64; 2])> {
    let per = FINE_TOKENS * FINE_TOKENS;
    let centre = FINE_TOKENS / 2;
    let mut out = Vec::new();
    for (m, &(ca, cb)) in pairs.iter().enumerate() {
        let blk = &gt.data()[m * per..(m + 1) * per];
        let row_hit = |u: usize| (0..FINE_TOKENS).find(|&v| blk[u * FINE_TOKENS + v] > 0.5).map(|v| (u, v));
        let hit = row_hit(centre).or_else(|| (0..FINE_TOKENS).find_map(row_hit));
        if let Some((u, v)) = hit {
            let pa = fine_point(grid, fine_window(grid, ca)[u]);
            let pb = fine_point(grid, fine_window(grid, cb)[v]);
            out.push((m, pa, pb));
        }
    }
    out
}

/// Epipolar loss on normalised coordinates when the pose is known,
/// otherwise the homography transfer surrogate.
fn subpixel_term(g: &mut Graph, xa: Var, xb: Var, gt: &GroundTruth, width: usize) -> Result<Var> {
    match (gt.e, gt.k) {
        (Some(e), Some(k)) => {
            let k = from_rows(&k);
            let kinv = invert(&k)?;
            let na = normalise_points(g, xa, &kinv)?;
            let nb = normalise_points(g, xb, &kinv)?;
            Ok(loss_subpixel(g, na, nb, &from_rows(&e))?.0)
        }
        _ => loss_reprojection(g, xa, xb, &gt.homography(), width),
    }
}

/// Applies an affine `K⁻¹` to rows of `[M, 2]`.
fn normalise_points(g: &mut Graph, x: Var, kinv: &Mat3) -> Result<Var> {
    let a = Tensor::new(&[2, 2], vec![kinv[(0, 0)], kinv[(1, 0)], kinv[(0, 1)], kinv[(1, 1)]])?;
    let c = Tensor::new(&[1, 2], vec![kinv[(0, 2)], kinv[(1, 2)]])?;
    let a = g.constant(a);
    let c = g.constant(c);
    let y = g.matmul(x, a)?;
    Ok(g.add(y, c)?)
}
