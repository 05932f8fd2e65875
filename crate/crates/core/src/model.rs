//! The assembled multimodal survival model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{FeatureBag, Modality};
use crate::error::{Error, Result};
use crate::fusion::{iterative_cross_attention, masked_self_attention, pool_concat, CrossBlock, RiskHead, SelfAttentionBlock};
use crate::moe::{
    full_mask, gate_report, gated_mixture, gumbel_topk_mask, renormalize_weights, selected_count, Gate, GateMask, GateRow,
    SlotPredictor,
};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::recon::{
    cross_modal_encode, cross_modal_reconstruct, reconstruct_genomic, reconstruct_histology, CrossInit, FrozenQueryMap,
    PositionTable, ReconHead,
};
use crate::scalar::Scalar;
use crate::slot::{assignment_map, Aggregation, Assignment, EncodedSlots, InitMode, SlotParams};
use crate::survival::{nll_graph, total_loss, HazardCurve, LossReport, LossTerms};

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub slots_h: usize,
    pub slots_g: usize,
    /// Slot attention iterations.
    pub iterations: usize,
    /// Cross-attention fusion rounds.
    pub fusion_rounds: usize,
    pub k_fraction: f64,
    pub gate_temperature: f64,
    pub n_bins: usize,
    pub aggregation: Aggregation,
    pub cross_init: CrossInit,
    /// Top-K slot selection; when off every slot is kept.
    pub selective: bool,
    /// Histology-to-genomic reconstruction during training.
    pub cross_recon: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            slots_h: 16,
            slots_g: 16,
            iterations: 10,
            fusion_rounds: 3,
            k_fraction: 0.25,
            gate_temperature: 0.01,
            n_bins: 4,
            aggregation: Aggregation::WeightedMean,
            cross_init: CrossInit::LearnedInit,
            selective: true,
            cross_recon: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.slots_h == 0 || self.slots_g == 0 || self.iterations == 0 || self.fusion_rounds == 0 || self.n_bins == 0 {
            return bad("slot counts, iterations, fusion_rounds and n_bins must be positive");
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return bad("k_fraction must lie in (0, 1]");
        }
        if !(self.gate_temperature > 0.0 && self.gate_temperature.is_finite()) {
            return bad("gate_temperature must be positive");
        }
        Ok(())
    }
}

/// Parameter handles for every component.
#[derive(Clone, Copy, Debug)]
pub struct Components {
    pub hist_slots: SlotParams,
    pub gen_slots: SlotParams,
    pub hist_gate: Gate,
    pub gen_gate: Gate,
    pub hist_pred: SlotPredictor,
    pub gen_pred: SlotPredictor,
    pub positions: PositionTable,
    pub recon_g: ReconHead,
    pub recon_h: ReconHead,
    pub recon_cross: ReconHead,
    pub qmap: FrozenQueryMap,
    pub self_h: SelfAttentionBlock,
    pub self_g: SelfAttentionBlock,
    pub cross: CrossBlock,
    pub risk: RiskHead,
}

impl Components {
    /// Named parameter groups, in a fixed order.
    pub fn groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        vec![
            ("hist_slots", self.hist_slots.params()),
            ("gen_slots", self.gen_slots.params()),
            ("hist_gate", self.hist_gate.params()),
            ("gen_gate", self.gen_gate.params()),
            ("hist_pred", self.hist_pred.params()),
            ("gen_pred", self.gen_pred.params()),
            ("positions", self.positions.params()),
            ("recon_g", self.recon_g.params()),
            ("recon_h", self.recon_h.params()),
            ("recon_cross", self.recon_cross.params()),
            ("qmap", self.qmap.params()),
            ("self_h", self.self_h.params()),
            ("self_g", self.self_g.params()),
            ("cross", self.cross.params()),
            ("risk", self.risk.params()),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct SlotSpe<F> {
    pub config: ModelConfig,
    /// Instance embedding width, shared by both modalities and the slots.
    pub d: usize,
    /// Pathways per genomic bag.
    pub m_g: usize,
    pub store: ParamStore<F>,
    pub parts: Components,
    /// Completed training epochs; zero means untrained.
    pub epochs_trained: usize,
}

/// One modality's slots after gating and refinement.
#[derive(Clone, Debug)]
pub struct Branch {
    pub encoded: EncodedSlots,
    pub scores: Var,
    pub mask: GateMask,
    pub weights: Var,
    /// Gated mixture of per-slot logits, `1×N_t`.
    pub logits: Var,
    pub refined: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub fused_logits: Var,
    /// Pooled `1×3d` embedding fed to the risk head.
    pub embedding: Var,
    pub hist: Branch,
    pub gen: Branch,
    /// Imputed genomic bag when none was given.
    pub imputed: Option<Var>,
}

/// Randomness for a forward pass: training draws slot initializations and
/// gate noise; inference uses neither.
pub enum Phase<'a> {
    Train(&'a mut ChaCha8Rng),
    Infer,
}

impl Phase<'_> {
    fn mode(&self) -> InitMode {
        match self {
            Phase::Train(_) => InitMode::Stochastic,
            Phase::Infer => InitMode::Deterministic,
        }
    }
}

/// Per-patient prediction and interpretability output.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub curve: HazardCurve,
    pub hist_assignments: Vec<Assignment>,
    pub gen_assignments: Vec<Assignment>,
    pub hist_gates: Vec<GateRow>,
    pub gen_gates: Vec<GateRow>,
    pub imputed: bool,
}

/// Survival label on the discretized grid; `bin` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Label {
    pub bin: usize,
    pub censored: bool,
}

impl<F: Scalar> SlotSpe<F> {
    pub fn new(config: ModelConfig, d: usize, m_g: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if d == 0 || m_g == 0 {
            return Err(Error::InvalidArgument("embedding width and pathway count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let c = &config;
        let parts = Components {
            hist_slots: SlotParams::new(&mut s, "hist_slots", c.slots_h, d, d, c.aggregation, r),
            gen_slots: SlotParams::new(&mut s, "gen_slots", c.slots_g, d, d, c.aggregation, r),
            hist_gate: Gate::new(&mut s, "hist_gate", d, r),
            gen_gate: Gate::new(&mut s, "gen_gate", d, r),
            hist_pred: SlotPredictor::new(&mut s, "hist_pred", d, c.n_bins, r),
            gen_pred: SlotPredictor::new(&mut s, "gen_pred", d, c.n_bins, r),
            positions: PositionTable::new(&mut s, "positions", m_g, d, r),
            recon_g: ReconHead::new(&mut s, "recon_g", d, d, r),
            recon_h: ReconHead::new(&mut s, "recon_h", d, d, r),
            recon_cross: ReconHead::new(&mut s, "recon_cross", d, d, r),
            qmap: FrozenQueryMap::new(&mut s, "qmap", d, r),
            self_h: SelfAttentionBlock::new(&mut s, "self_h", d, r),
            self_g: SelfAttentionBlock::new(&mut s, "self_g", d, r),
            cross: CrossBlock::new(&mut s, "cross", d, r),
            risk: RiskHead::new(&mut s, "risk", d, c.n_bins, r),
        };
        Ok(Self { config, d, m_g, store: s, parts, epochs_trained: 0 })
    }

    pub fn check_bags(&self, histology: &Tensor<F>, genomic: Option<&Tensor<F>>) -> Result<()> {
        if histology.rows() == 0 || histology.cols() != self.d {
            return Err(Error::Data(format!(
                "histology bag is {}×{}, model expects M×{}",
                histology.rows(),
                histology.cols(),
                self.d
            )));
        }
        if let Some(x) = genomic {
            if x.shape() != [self.m_g, self.d] {
                return Err(Error::Data(format!("genomic bag is {}×{}, model expects {}×{}", x.rows(), x.cols(), self.m_g, self.d)));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn branch(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        encoded: EncodedSlots,
        gate: &Gate,
        pred: &SlotPredictor,
        block: &SelfAttentionBlock,
        phase: &mut Phase,
    ) -> Result<Branch> {
        let scores = gate.scores(g, p, encoded.slots)?;
        let s = g.shape(encoded.slots)[0];
        let tau = self.config.gate_temperature;
        let mask = if self.config.selective {
            let k = selected_count(s, self.config.k_fraction);
            match phase {
                Phase::Train(rng) => gumbel_topk_mask(g, scores, k, tau, Some(&mut **rng))?,
                Phase::Infer => gumbel_topk_mask::<F, ChaCha8Rng>(g, scores, k, tau, None)?,
            }
        } else {
            full_mask(g, scores, tau)?
        };
        let weights = renormalize_weights(g, scores, &mask)?;
        let slot_logits = pred.logits(g, p, encoded.slots)?;
        let logits = gated_mixture(g, weights, slot_logits)?;
        let refined = masked_self_attention(g, p, block, encoded.slots, &mask.selected)?;
        Ok(Branch { encoded, scores, mask, weights, logits, refined })
    }

    /// Histology slots re-read through the genomic slot parameters.
    pub fn cross_slots(&self, g: &mut Graph<F>, p: &Bound, histology: Var, genomic_slots: Option<Var>, phase: &mut Phase) -> Result<EncodedSlots> {
        let mode = phase.mode();
        let init = match self.config.cross_init {
            CrossInit::LearnedInit => None,
            CrossInit::EncodedGenomic => genomic_slots,
        };
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let rng: &mut ChaCha8Rng = match phase {
            Phase::Train(rng) => rng,
            Phase::Infer => &mut scratch,
        };
        Ok(cross_modal_encode(g, p, &self.parts.gen_slots, histology, self.config.iterations, mode, init, rng)?)
    }

    /// Full forward pass. Without a genomic bag, one is imputed from histology.
    pub fn forward(&self, g: &mut Graph<F>, p: &Bound, histology: Var, genomic: Option<Var>, phase: &mut Phase) -> Result<Forward> {
        let c = &self.parts;
        let (genomic, imputed) = match genomic {
            Some(x) => (x, None),
            None => {
                let cross = self.cross_slots(g, p, histology, None, phase)?;
                let rec = cross_modal_reconstruct(g, p, cross.slots, &c.positions, &c.recon_cross, None)?;
                (rec.output, Some(rec.output))
            }
        };
        let mode = phase.mode();
        let t = self.config.iterations;
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let (enc_h, enc_g) = {
            let rng: &mut ChaCha8Rng = match phase {
                Phase::Train(rng) => rng,
                Phase::Infer => &mut scratch,
            };
            let h = c.hist_slots.encode(g, p, histology, t, mode, rng)?;
            let s = c.gen_slots.encode(g, p, genomic, t, mode, rng)?;
            (h, s)
        };
        let hist = self.branch(g, p, enc_h, &c.hist_gate, &c.hist_pred, &c.self_h, phase)?;
        let gen = self.branch(g, p, enc_g, &c.gen_gate, &c.gen_pred, &c.self_g, phase)?;
        let (fused_h, fused_g) =
            iterative_cross_attention(g, p, &c.cross, enc_h.slots, enc_g.slots, self.config.fusion_rounds)?;
        let z = pool_concat(g, fused_h, fused_g, hist.refined, gen.refined)?;
        let fused_logits = c.risk.forward(g, p, z)?;
        Ok(Forward { fused_logits, embedding: z, hist, gen, imputed })
    }

    /// Training objective for one patient with both bags present.
    #[allow(clippy::too_many_arguments)]
    pub fn patient_loss(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        histology: Var,
        genomic: Var,
        label: Label,
        lambda: f64,
        phase: &mut Phase,
    ) -> Result<(Var, LossReport)> {
        let out = self.forward(g, p, histology, Some(genomic), phase)?;
        let c = &self.parts;
        let surv = |g: &mut Graph<F>, v| nll_graph(g, v, label.bin, label.censored);
        let surv_fused = surv(g, out.fused_logits)?;
        let surv_hist = surv(g, out.hist.logits)?;
        let surv_gen = surv(g, out.gen.logits)?;
        let (mut recon_g, mut recon_h, mut recon_cross) = (None, None, None);
        if lambda != 0.0 {
            recon_g = reconstruct_genomic(g, p, out.gen.encoded.slots, &c.positions, &c.recon_g, Some(genomic))?.loss;
            recon_h = reconstruct_histology(g, p, out.hist.encoded.slots, histology, &c.qmap, &c.recon_h)?.loss;
            if self.config.cross_recon {
                let cross = self.cross_slots(g, p, histology, Some(out.gen.encoded.slots), phase)?;
                recon_cross = cross_modal_reconstruct(g, p, cross.slots, &c.positions, &c.recon_cross, Some(genomic))?.loss;
            }
        }
        let terms = LossTerms { surv_fused, surv_hist, surv_gen, recon_g, recon_h, recon_cross };
        Ok(total_loss(g, &terms, lambda)?)
    }

    /// Deterministic prediction for one patient.
    pub fn infer(&self, histology: &Tensor<F>, genomic: Option<&Tensor<F>>) -> Result<Inference> {
        self.check_bags(histology, genomic)?;
        if genomic.is_none() && self.epochs_trained == 0 {
            return Err(Error::Untrained);
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let h = g.constant(histology.clone());
        let x = genomic.map(|x| g.constant(x.clone()));
        let out = self.forward(&mut g, &p, h, x, &mut Phase::Infer)?;
        Ok(Inference {
            curve: HazardCurve::from_logits(g.value(out.fused_logits).data()),
            hist_assignments: assignment_map(g.value(out.hist.encoded.attention)),
            gen_assignments: assignment_map(g.value(out.gen.encoded.attention)),
            hist_gates: gate_report(&g, out.hist.scores, &out.hist.mask, out.hist.weights),
            gen_gates: gate_report(&g, out.gen.scores, &out.gen.mask, out.gen.weights),
            imputed: out.imputed.is_some(),
        })
    }

    /// Genomic surrogate reconstructed from histology alone.
    pub fn impute_genomic(&self, histology: &Tensor<F>) -> Result<FeatureBag<F>> {
        if self.epochs_trained == 0 {
            return Err(Error::Untrained);
        }
        self.check_bags(histology, None)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let h = g.constant(histology.clone());
        let cross = self.cross_slots(&mut g, &p, h, None, &mut Phase::Infer)?;
        let rec = cross_modal_reconstruct(&mut g, &p, cross.slots, &self.parts.positions, &self.parts.recon_cross, None)?;
        Ok(FeatureBag::new(Modality::Genomic, g.value(rec.output).clone())?)
    }

    /// Converts every parameter to another scalar width.
    pub fn cast<G: Scalar>(&self) -> SlotSpe<G> {
        SlotSpe {
            config: self.config.clone(),
            d: self.d,
            m_g: self.m_g,
            store: self.store.cast(),
            parts: self.parts,
            epochs_trained: self.epochs_trained,
        }
    }
}

/// Random row subset of at most `limit` rows, kept in original order.
pub fn subsample_rows<F: Scalar, R: Rng + ?Sized>(bag: &Tensor<F>, limit: usize, rng: &mut R) -> Tensor<F> {
    if bag.rows() <= limit {
        return bag.clone();
    }
    let mut idx = rand::seq::index::sample(rng, bag.rows(), limit).into_vec();
    idx.sort_unstable();
    bag.select_rows(&idx)
}
