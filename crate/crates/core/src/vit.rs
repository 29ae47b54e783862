//! Vision transformer used both as the full-token teacher and, with slimming
//! modules at its stage boundaries, as the slimmed student.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Result, SitError};
use crate::nn::{BlockIds, LayerNormIds, LinearIds};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::recalib::{rtsm_for_stage, RtsmIds};
use crate::scalar::Scalar;
use crate::slim::{SlimMatrix, StageSchedule, TsmIds, TsmParams};
use crate::tensor::Tensor;

/// Rearranges an `H × W × ch` image into `N × (p·p·ch)` flattened patches,
/// patches in row-major grid order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, ch] = match image.shape() {
        [h, w, ch] => [*h, *w, *ch],
        s => return Err(SitError::shape("patchify", s, &[0, 0, 0])),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(SitError::Config(format!(
            "image {h}×{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * ch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let row = (py * patch + dy) * w + px * patch;
                out.extend_from_slice(&src[row * ch..(row + patch) * ch]);
            }
        }
    }
    Tensor::new(&[gh * gw, pd], out)
}

/// Parameter handles of the whole network.
#[derive(Clone, Debug)]
struct Layout {
    patch_embed: LinearIds,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<BlockIds>,
    norm: LayerNormIds,
    head: LinearIds,
    head_dist: Option<LinearIds>,
    tsm: Vec<TsmIds>,
    /// One entry per stage; `None` for stage 0 or when stripped.
    rtsm: Vec<Option<RtsmIds>>,
}

/// Recorded outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `1 × num_classes` class-token logits.
    pub logits: Var,
    pub distill_logits: Option<Var>,
    /// Output of every block, `(1 + N_s) × C` with the class token first.
    pub block_tokens: Vec<Var>,
    /// Attention nodes of every block (see [`Tape::attention_probs`]).
    pub attention: Vec<Var>,
    /// Aggregation matrix of every slimming module.
    pub slim: Vec<Var>,
    /// Per block, `(1 + N) × C` features aligned with the unslimmed token
    /// layout (class token first). Empty unless requested.
    pub recalibrated: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct VisionTransformer<T: Scalar> {
    config: ModelConfig,
    schedule: StageSchedule,
    pub params: ParamStore<T>,
    layout: Layout,
    identity_slimming: bool,
}

impl<T: Scalar> VisionTransformer<T> {
    /// Freshly initialized model. Slimmed configurations also get one
    /// training-only recalibration branch per slimmed stage.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.embed_dim;
        let g = ParamGroup::Backbone;
        LinearIds::register(
            &mut store,
            "patch_embed",
            config.patch_dim(),
            c,
            true,
            g,
            false,
            &mut rng,
        );
        store.add(
            "cls_token",
            Tensor::randn(&[1, c], &mut rng).map(|v| v * T::lit(0.02)),
            g,
            false,
        );
        store.add(
            "pos_embed",
            Tensor::randn(&[config.content_tokens(), c], &mut rng).map(|v| v * T::lit(0.02)),
            g,
            false,
        );
        for b in 0..config.depth {
            BlockIds::register(
                &mut store,
                &format!("blocks.{b}"),
                c,
                config.heads,
                config.mlp_ratio,
                &mut rng,
            );
        }
        LayerNormIds::register(&mut store, "norm", c, g, false);
        LinearIds::register(
            &mut store,
            "head",
            c,
            config.num_classes,
            true,
            g,
            false,
            &mut rng,
        );
        if config.use_distill_head {
            LinearIds::register(
                &mut store,
                "head_dist",
                c,
                config.num_classes,
                true,
                g,
                false,
                &mut rng,
            );
        }
        for s in 1..schedule.stages() {
            let p = TsmParams::init(c, schedule.tokens(s), &mut rng);
            TsmIds::register(&mut store, &format!("tsm.{s}"), p);
        }
        for s in 1..schedule.stages() {
            let shape = rtsm_for_stage(s, &schedule).expect("slimmed stage");
            RtsmIds::register(
                &mut store,
                &format!("rtsm.{s}"),
                shape,
                c,
                config.mlp_ratio,
                &mut rng,
            );
        }
        Self::from_params(config, store)
    }

    /// Binds a model to an existing parameter set (e.g. a loaded checkpoint).
    /// Recalibration branches are optional.
    pub fn from_params(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let layout = Layout::resolve(&config, &schedule, &store)?;
        let model = VisionTransformer {
            config,
            schedule,
            params: store,
            layout,
            identity_slimming: false,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = self.config.embed_dim;
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            let got = self.params.get(id).shape();
            if got != shape {
                return Err(SitError::Format(format!(
                    "parameter `{}` has shape {got:?}, expected {shape:?}",
                    self.params.param(id).name
                )));
            }
            Ok(())
        };
        expect(
            self.layout.patch_embed.weight,
            &[self.config.patch_dim(), c],
        )?;
        expect(self.layout.cls_token, &[1, c])?;
        expect(self.layout.pos_embed, &[self.config.content_tokens(), c])?;
        expect(self.layout.head.weight, &[c, self.config.num_classes])?;
        for b in &self.layout.blocks {
            expect(b.qkv.weight, &[c, 3 * c])?;
        }
        for (s, t) in self.layout.tsm.iter().enumerate() {
            expect(t.w_q, &[self.schedule.tokens(s + 1), c / 2])?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &StageSchedule {
        &self.schedule
    }

    pub fn has_recalibration(&self) -> bool {
        self.layout.rtsm.iter().any(Option::is_some)
    }

    /// Replaces every slimming module by the identity map (only valid when
    /// the keep ratio is one). Used to check that an inheriting student
    /// computes exactly what its teacher computes.
    pub fn set_identity_slimming(&mut self, on: bool) -> Result<()> {
        if on
            && self
                .schedule
                .counts()
                .iter()
                .any(|&n| n != self.schedule.tokens(0))
        {
            return Err(SitError::Config(
                "identity slimming needs keep_ratio = 1".into(),
            ));
        }
        self.identity_slimming = on;
        Ok(())
    }

    /// Copy without training-only parameters, as an inference loader would
    /// see it.
    pub fn without_recalibration(&self) -> Result<Self> {
        let mut store = ParamStore::new();
        for (_, p) in self.params.iter().filter(|(_, p)| !p.training_only) {
            store.add(p.name.clone(), p.tensor.clone(), p.group, false);
        }
        Self::from_params(self.config.clone(), store)
    }

    pub fn tsm_ids(&self) -> &[TsmIds] {
        &self.layout.tsm
    }

    pub fn rtsm_ids(&self, stage: usize) -> Option<&RtsmIds> {
        self.layout.rtsm.get(stage).and_then(Option::as_ref)
    }

    /// Converts pixels to the input tensor `H × W × ch`.
    pub fn image_tensor(&self, pixels: &[f32]) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        Tensor::new(
            &[s, s, self.config.in_channels],
            pixels.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    /// `N × C` patch tokens with the positional embedding added.
    pub fn patch_embed<'p>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        image: &Tensor<T>,
    ) -> Result<Var> {
        let patches = tape.constant(patchify(image, self.config.patch_size)?);
        let x = self.layout.patch_embed.forward(store, tape, patches)?;
        let pos = tape.param(store, self.layout.pos_embed);
        tape.add(x, pos)
    }

    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        image: &Tensor<T>,
        recalibrate: bool,
    ) -> Result<Forward> {
        self.forward_with(&self.params, tape, image, recalibrate)
    }

    /// Forward pass reading parameters from `store`, which must have this
    /// model's layout (used by finite-difference checks on perturbed copies).
    pub fn forward_with<'p>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        image: &Tensor<T>,
        recalibrate: bool,
    ) -> Result<Forward> {
        let l = &self.layout;
        let content = self.patch_embed(store, tape, image)?;
        let cls = tape.param(store, l.cls_token);
        let mut x = tape.concat_rows(&[cls, content])?;
        let stage_of = self.config.block_stages();
        let mut block_tokens = Vec::with_capacity(self.config.depth);
        let mut attention = Vec::with_capacity(self.config.depth);
        let mut slim = Vec::new();
        let mut recalibrated = Vec::new();
        for (b, block) in l.blocks.iter().enumerate() {
            let stage = stage_of[b];
            if b > 0 && stage != stage_of[b - 1] {
                x = self.slim_tokens(store, tape, x, stage, &mut slim)?;
            }
            let out = block.forward(store, tape, x)?;
            x = out.tokens;
            block_tokens.push(x);
            attention.push(out.attention);
            if recalibrate {
                recalibrated.push(self.recalibrate_block(store, tape, x, stage)?);
            }
        }
        let cls_out = tape.slice_rows(x, 0, 1)?;
        let cls_out = l.norm.forward(store, tape, cls_out)?;
        let logits = l.head.forward(store, tape, cls_out)?;
        let distill_logits = match &l.head_dist {
            Some(h) => Some(h.forward(store, tape, cls_out)?),
            None => None,
        };
        Ok(Forward {
            logits,
            distill_logits,
            block_tokens,
            attention,
            slim,
            recalibrated,
        })
    }

    /// Slims the content tokens entering `stage`; the class token bypasses
    /// the aggregation and is re-attached in front.
    fn slim_tokens<'p>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        x: Var,
        stage: usize,
        record: &mut Vec<Var>,
    ) -> Result<Var> {
        let n = tape.shape(x)[0] - 1;
        let cls = tape.slice_rows(x, 0, 1)?;
        let content = tape.slice_rows(x, 1, n)?;
        let a = if self.identity_slimming {
            tape.constant(Tensor::eye(n))
        } else {
            self.layout.tsm[stage - 1].attention(store, tape, content, self.config.slim_axis)?
        };
        record.push(a);
        let slimmed = tape.matmul(a, content)?;
        tape.concat_rows(&[cls, slimmed])
    }

    fn recalibrate_block<'p>(
        &self,
        store: &'p ParamStore<T>,
        tape: &mut Tape<'p, T>,
        x: Var,
        stage: usize,
    ) -> Result<Var> {
        if stage == 0 {
            return Ok(x);
        }
        let ids = self.layout.rtsm[stage].as_ref().ok_or_else(|| {
            SitError::Config(format!("no recalibration branch loaded for stage {stage}"))
        })?;
        let n = tape.shape(x)[0] - 1;
        let cls = tape.slice_rows(x, 0, 1)?;
        let content = tape.slice_rows(x, 1, n)?;
        let full = ids.forward(store, tape, content)?;
        tape.concat_rows(&[cls, full])
    }

    /// Logits of a single image (inference, no recalibration).
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::frozen();
        let out = self.forward(&mut tape, image, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Aggregation matrices of every slimming module for one image.
    pub fn slim_matrices(&self, image: &Tensor<T>) -> Result<Vec<SlimMatrix<T>>> {
        let mut tape = Tape::frozen();
        let out = self.forward(&mut tape, image, false)?;
        Ok(out
            .slim
            .iter()
            .map(|&a| SlimMatrix(tape.value(a).clone()))
            .collect())
    }
}

impl Layout {
    fn resolve<T: Scalar>(
        config: &ModelConfig,
        schedule: &StageSchedule,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        let missing = |n: &str| SitError::Format(format!("missing parameter `{n}`"));
        let blocks = (0..config.depth)
            .map(|b| BlockIds::resolve(store, &format!("blocks.{b}"), config.heads))
            .collect::<Result<Vec<_>>>()?;
        let head_dist = if config.use_distill_head {
            Some(LinearIds::resolve(store, "head_dist")?)
        } else {
            None
        };
        let tsm = (1..schedule.stages())
            .map(|s| {
                let p = format!("tsm.{s}");
                TsmIds::resolve(store, &p).ok_or_else(|| missing(&p))
            })
            .collect::<Result<Vec<_>>>()?;
        let rtsm = (0..schedule.stages())
            .map(|s| {
                if s == 0 {
                    None
                } else {
                    RtsmIds::resolve(store, &format!("rtsm.{s}"))
                }
            })
            .collect();
        Ok(Layout {
            patch_embed: LinearIds::resolve(store, "patch_embed")?,
            cls_token: store.id("cls_token").ok_or_else(|| missing("cls_token"))?,
            pos_embed: store.id("pos_embed").ok_or_else(|| missing("pos_embed"))?,
            blocks,
            norm: LayerNormIds::resolve(store, "norm")?,
            head: LinearIds::resolve(store, "head")?,
            head_dist,
            tsm,
            rtsm,
        })
    }
}
