//! Full model assembly: encoder, width adjustment, bidirectional extractor,
//! fusion, emission head, and optional CRF, wired according to a
//! [`ModelConfig`]. Each configuration flag swaps one stage, and the
//! parameter manifest only contains what the wiring actually uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bimamba2::{dot_product_fusion, BiLstmParams, BiMamba2Params, DirectionStreams, FcIn};
use crate::config::{Extractor, ModelConfig};
use crate::data::{Label, NUM_LABELS};
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::marking::{
    argmax_decode, crf_nll, token_ce_loss, viterbi_decode, CrfParams, PlainHeadParams,
    SkipNetParams,
};
use crate::optim::{grad_check, GradCheckReport, TapeObjective};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// The five single-component ablations. Each switches exactly one stage of
/// the full model off or replaces it with a plain counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Drop the encoder layers; raw embeddings feed the extractor.
    IrBert,
    /// Swap the Mamba2 blocks for LSTMs.
    IrMamba2,
    /// Replace attention fusion with concatenation plus a learned map.
    IrDotPAtt,
    /// Replace the skip-connection head with a single affine map.
    IrSkipCon,
    /// Drop the CRF; train with token cross-entropy, decode per position.
    IrCrf,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::IrBert,
        Ablation::IrMamba2,
        Ablation::IrDotPAtt,
        Ablation::IrSkipCon,
        Ablation::IrCrf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::IrBert => "ir-bert",
            Ablation::IrMamba2 => "ir-mamba2",
            Ablation::IrDotPAtt => "ir-dot-p-att",
            Ablation::IrSkipCon => "ir-skip-con",
            Ablation::IrCrf => "ir-crf",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Flips the one config field this ablation controls.
    pub fn apply(self, config: &mut ModelConfig) {
        match self {
            Ablation::IrBert => config.use_encoder = false,
            Ablation::IrMamba2 => config.extractor = Extractor::Lstm,
            Ablation::IrDotPAtt => config.use_attention_fusion = false,
            Ablation::IrSkipCon => config.use_skip_connection = false,
            Ablation::IrCrf => config.use_crf = false,
        }
    }
}

enum ExtractorParams {
    Mamba2(BiMamba2Params),
    Lstm(BiLstmParams),
}

impl ExtractorParams {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<DirectionStreams> {
        match self {
            ExtractorParams::Mamba2(p) => p.forward(tape, store, x),
            ExtractorParams::Lstm(p) => p.forward(tape, store, x),
        }
    }
}

enum HeadParams {
    Skip(SkipNetParams),
    Plain(PlainHeadParams),
}

impl HeadParams {
    fn emissions(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            HeadParams::Skip(p) => p.emissions(tape, store, x),
            HeadParams::Plain(p) => p.emissions(tape, store, x),
        }
    }
}

/// An assembled model: parameter store plus wiring.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    encoder: EncoderParams,
    fc_in: FcIn,
    extractor: ExtractorParams,
    fusion_proj: Option<FcIn>,
    head: HeadParams,
    crf: Option<CrfParams>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.store.total_scalars())
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Builds parameters and wiring from the config. Initialization is
    /// deterministic in `config.seed`; registration order fixes the
    /// checkpoint manifest order.
    pub fn assemble(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let depth = if config.use_encoder {
            config.encoder_depth
        } else {
            0
        };
        let encoder = EncoderParams::register(
            &mut store,
            &mut rng,
            config.vocab_size,
            config.n_max,
            config.d_model,
            config.d_ff,
            depth,
        );
        let fc_in = FcIn::register(&mut store, &mut rng, "fc_in", config.d_model, config.d_adj);
        let extractor = match config.extractor {
            Extractor::Mamba2 => ExtractorParams::Mamba2(BiMamba2Params::register(
                &mut store,
                &mut rng,
                config.d_adj,
                config.d_inner,
                config.d_state,
                config.conv_kernel,
            )),
            Extractor::Lstm => {
                ExtractorParams::Lstm(BiLstmParams::register(&mut store, &mut rng, config.d_adj))
            }
        };
        let fusion_proj = if config.use_attention_fusion {
            None
        } else {
            Some(FcIn::register(
                &mut store,
                &mut rng,
                "fusion",
                2 * config.d_adj,
                config.d_adj,
            ))
        };
        let head = if config.use_skip_connection {
            HeadParams::Skip(SkipNetParams::register(
                &mut store,
                &mut rng,
                config.d_adj,
                config.h1,
                config.h2,
            ))
        } else {
            HeadParams::Plain(PlainHeadParams::register(
                &mut store,
                &mut rng,
                config.d_adj,
            ))
        };
        let crf = if config.use_crf {
            Some(CrfParams::register(&mut store, &mut rng))
        } else {
            None
        };

        Ok(Model {
            config,
            store,
            encoder,
            fc_in,
            extractor,
            fusion_proj,
            head,
            crf,
        })
    }

    /// Name and shape of every parameter, in manifest order.
    pub fn param_manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
            .collect()
    }

    /// As [`Model::emissions`], but reading parameter values from an
    /// external store with the same layout (used while probing gradients).
    pub fn emissions_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
    ) -> Result<Var> {
        let enc = self.encoder.encode(tape, store, ids)?;
        let adj = self.fc_in.apply(tape, store, enc)?;
        let streams = self.extractor.forward(tape, store, adj)?;
        let fused = match &self.fusion_proj {
            None => dot_product_fusion(tape, streams.forward, streams.backward)?.fused,
            Some(proj) => {
                let cat = tape.concat_cols(streams.forward, streams.backward);
                proj.apply(tape, store, cat)?
            }
        };
        self.head.emissions(tape, store, fused)
    }

    /// Per-position label scores `[n, 3]` for a token-id sequence.
    pub fn emissions(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        self.emissions_with(tape, &self.store, ids)
    }

    /// As [`Model::sequence_loss`] with an external parameter store.
    pub fn sequence_loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        labels: &[Label],
    ) -> Result<Var> {
        let emissions = self.emissions_with(tape, store, ids)?;
        match &self.crf {
            Some(crf) => crf_nll(tape, store, crf, emissions, labels),
            None => token_ce_loss(tape, emissions, labels),
        }
    }

    /// Training loss for one labeled sequence: CRF negative log-likelihood,
    /// or summed token cross-entropy when the CRF is off.
    pub fn sequence_loss(&self, tape: &mut Tape, ids: &[usize], labels: &[Label]) -> Result<Var> {
        self.sequence_loss_with(tape, &self.store, ids, labels)
    }

    /// Most likely label sequence for a token-id sequence.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<Label>> {
        let mut tape = Tape::new();
        let emissions = self.emissions(&mut tape, ids)?;
        let emissions = tape.value(emissions);
        match &self.crf {
            Some(crf) => viterbi_decode(
                emissions,
                self.store.get(crf.transitions),
                self.store.get(crf.start),
                self.store.get(crf.end),
                self.config.constrained_decode,
            ),
            None => argmax_decode(emissions),
        }
    }
}

/// Assembles a model from the config (with its seed replaced by `seed`),
/// draws one random labeled sequence of length `min(n_max, 6)`, and checks
/// every parameter group's analytic sequence-loss gradient against central
/// finite differences at eps 1e-5.
pub fn run_gradcheck(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.seed = seed;
    let mut model = Model::assemble(config.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = config.n_max.min(6);
    let ids: Vec<usize> = (0..n)
        .map(|_| rng.random_range(0..config.vocab_size))
        .collect();
    let labels: Vec<Label> = (0..n)
        .map(|_| Label::from_index(rng.random_range(0..NUM_LABELS)).unwrap())
        .collect();

    // Surface any forward-pass error before probing starts; inside the
    // probe loop the same computation cannot fail.
    {
        let mut tape = Tape::new();
        model.sequence_loss(&mut tape, &ids, &labels)?;
    }

    let mut store = std::mem::take(&mut model.store);
    let mut objective = TapeObjective::new(|tape: &mut Tape, store: &ParamStore| {
        model
            .sequence_loss_with(tape, store, &ids, &labels)
            .expect("loss already validated on these inputs")
    });
    Ok(grad_check(&mut store, &mut objective, 1e-5))
}
