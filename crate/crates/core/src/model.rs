//! Parameter store and the full two-modality forward pass.
//!
//! All parameters live in a name-keyed store; [`Model::bind`] places each one
//! on a tape exactly once per forward pass, so weight sharing (the global
//! projection, the per-part projections, MV-NLN across modalities, the ID
//! classifiers) is structural: there is a single parameter object per shared
//! weight, referenced by every call site.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::config::ModelConfig;
use crate::data::TokenizedCaption;
use crate::encoders::{self, ConvVars, LstmVars, TextEncoderVars};
use crate::error::{Error, Result};
use crate::global_branch;
use crate::pfl;
use crate::prl::{self, MvNlnVars};

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    /// Normal(0, sqrt(2 / fan_in)), for conv layers feeding ReLU.
    HeNormal { fan_in: usize },
    /// Normal(0, sqrt(1 / fan_in)), for linear projections.
    Xavier { fan_in: usize },
    /// Normal(0, 0.1), for the embedding table.
    Embedding,
    /// Uniform(-1/sqrt(H), 1/sqrt(H)), for recurrence weights.
    LstmUniform { hidden: usize },
    /// Zero bias with the forget gate set to `forget`.
    LstmBias { hidden: usize, forget: f64 },
}

fn param_specs(
    cfg: &ModelConfig,
    num_classes: usize,
    vocab_table: usize,
) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.visual.channels;
    let hidden = cfg.hidden();
    let v = cfg.embed_dim;
    let m = cfg.feature_dim;
    let m_prime = cfg.relation_embed_dim;
    let n = cfg.relation_dim;
    let k = cfg.k_parts;
    let mut specs = Vec::new();
    let mut c_in = 3usize;
    for (i, (c_out, kernel, _, _)) in cfg.visual.blocks().into_iter().enumerate() {
        let fan_in = c_in * kernel * kernel;
        specs.push((
            format!("encoders.visual.conv{i}.weight"),
            vec![c_out, fan_in],
            Init::HeNormal { fan_in },
        ));
        specs.push((format!("encoders.visual.conv{i}.bias"), vec![c_out, 1], Init::Zeros));
        c_in = c_out;
    }
    specs.push(("encoders.text.embed".into(), vec![v, vocab_table], Init::Embedding));
    for dir in ["fwd", "bwd"] {
        specs.push((
            format!("encoders.text.{dir}.w_ih"),
            vec![4 * hidden, v],
            Init::LstmUniform { hidden },
        ));
        specs.push((
            format!("encoders.text.{dir}.w_hh"),
            vec![4 * hidden, hidden],
            Init::LstmUniform { hidden },
        ));
        specs.push((
            format!("encoders.text.{dir}.bias"),
            vec![4 * hidden, 1],
            Init::LstmBias { hidden, forget: cfg.lstm_forget_bias },
        ));
    }
    specs.push(("global.proj.weight".into(), vec![m, c], Init::Xavier { fan_in: c }));
    specs.push(("global.proj.bias".into(), vec![m, 1], Init::Zeros));
    // Zero start: every word opens at score 0.5 for every part, so the learned
    // cross-part ordering reflects alignment pressure rather than init noise.
    specs.push(("pfl.wam.weight".into(), vec![k, c], Init::Zeros));
    specs.push(("pfl.wam.bias".into(), vec![k, 1], Init::Zeros));
    for p in 0..k {
        specs.push((format!("pfl.part{p}.weight"), vec![m, c], Init::Xavier { fan_in: c }));
        specs.push((format!("pfl.part{p}.bias"), vec![m, 1], Init::Zeros));
    }
    for p in 0..k {
        specs.push((format!("prl.theta{p}.weight"), vec![m_prime, m], Init::Xavier { fan_in: m }));
        specs.push((format!("prl.phi{p}.weight"), vec![m_prime, m], Init::Xavier { fan_in: m }));
        specs.push((format!("prl.gamma{p}.weight"), vec![m, m_prime], Init::Xavier { fan_in: m_prime }));
        specs.push((format!("prl.gamma{p}.bias"), vec![m, 1], Init::Zeros));
        specs.push((format!("prl.out{p}.weight"), vec![n, m], Init::Xavier { fan_in: m }));
        specs.push((format!("prl.out{p}.bias"), vec![n, 1], Init::Zeros));
    }
    specs.push(("losses.id.global.weight".into(), vec![num_classes, m], Init::Xavier { fan_in: m }));
    specs.push(("losses.id.global.bias".into(), vec![num_classes, 1], Init::Zeros));
    for p in 0..k {
        specs.push((format!("losses.id.pfl{p}.weight"), vec![num_classes, m], Init::Xavier { fan_in: m }));
        specs.push((format!("losses.id.pfl{p}.bias"), vec![num_classes, 1], Init::Zeros));
        specs.push((format!("losses.id.prl{p}.weight"), vec![num_classes, n], Init::Xavier { fan_in: n }));
        specs.push((format!("losses.id.prl{p}.bias"), vec![num_classes, 1], Init::Zeros));
    }
    specs
}

fn init_array(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let count: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; count],
        Init::HeNormal { fan_in } => {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            (0..count).map(|_| dist.sample(rng)).collect()
        }
        Init::Xavier { fan_in } => {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            (0..count).map(|_| dist.sample(rng)).collect()
        }
        Init::Embedding => {
            let dist = Normal::new(0.0, 0.1).unwrap();
            (0..count).map(|_| dist.sample(rng)).collect()
        }
        Init::LstmUniform { hidden } => {
            let bound = 1.0 / (hidden as f64).sqrt();
            (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
        }
        Init::LstmBias { hidden, forget } => {
            let mut b = vec![0.0; count];
            for x in b.iter_mut().take(2 * hidden).skip(hidden) {
                *x = forget;
            }
            b
        }
    };
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Name-keyed, deterministically ordered parameter tensors.
pub type ParamStore = BTreeMap<String, ArrayD<f64>>;

/// Tape handles for every parameter, grouped per module, plus the name->var
/// map used to collect gradients.
pub struct ModelVars {
    pub conv: Vec<ConvVars>,
    pub text: TextEncoderVars,
    pub global_proj: (Var, Var),
    pub wam: (Var, Var),
    pub part_proj: Vec<(Var, Var)>,
    pub mvnln: MvNlnVars,
    pub id_global: (Var, Var),
    pub id_pfl: Vec<(Var, Var)>,
    pub id_prl: Vec<(Var, Var)>,
    pub named: Vec<(String, Var)>,
}

/// One modality's features on the tape.
pub struct BundleVars {
    pub global: Var,
    pub parts: Vec<Var>,
    pub relations: Vec<Var>,
    pub parts_concat: Var,
    pub relations_concat: Var,
}

/// Plain-value features of one sample: the global vector, the concatenated K
/// part features, and the concatenated K relation features.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureBundle {
    pub global: Vec<f64>,
    pub parts_concat: Vec<f64>,
    pub relations_concat: Vec<f64>,
}

/// The (S_g, S_l, S_n) cosine scores of one image-text pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimilarityTriple {
    pub global: f64,
    pub parts: f64,
    pub relations: f64,
}

impl FeatureBundle {
    pub fn similarity(&self, other: &FeatureBundle) -> Result<SimilarityTriple> {
        Ok(SimilarityTriple {
            global: global_branch::cosine(&self.global, &other.global)?,
            parts: global_branch::cosine(&self.parts_concat, &other.parts_concat)?,
            relations: global_branch::cosine(&self.relations_concat, &other.relations_concat)?,
        })
    }
}

/// The complete model: config plus parameter store.
#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub vocab_table: usize,
    pub params: ParamStore,
}

impl Model {
    /// Seeded variance-scaled initialization of every parameter.
    pub fn new(config: ModelConfig, num_classes: usize, vocab_table: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config, num_classes, vocab_table) {
            params.insert(name, init_array(&shape, init, &mut rng));
        }
        Ok(Model {
            config,
            num_classes,
            vocab_table,
            params,
        })
    }

    /// Replace parameters by name from an external archive (pretrained
    /// backbone weights). Unknown keys are rejected; shapes must match.
    pub fn load_pretrained(&mut self, weights: &ParamStore) -> Result<()> {
        for (name, tensor) in weights {
            match self.params.get_mut(name) {
                Some(slot) => {
                    if slot.shape() != tensor.shape() {
                        return Err(Error::Shape {
                            expected: format!("{:?} for {name}", slot.shape()),
                            actual: format!("{:?}", tensor.shape()),
                        });
                    }
                    *slot = tensor.clone();
                }
                None => return Err(Error::Checkpoint(format!("unknown parameter key {name}"))),
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Place every parameter on the tape exactly once.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let mut named = Vec::with_capacity(self.params.len());
        let mut leaf = |tape: &mut Tape, name: &str| -> Var {
            let var = tape.leaf(self.params[name].clone());
            named.push((name.to_string(), var));
            var
        };
        let blocks = self.config.visual.blocks();
        let conv = blocks
            .iter()
            .enumerate()
            .map(|(i, &(_, k, s, p))| ConvVars {
                weight: leaf(tape, &format!("encoders.visual.conv{i}.weight")),
                bias: leaf(tape, &format!("encoders.visual.conv{i}.bias")),
                kernel: k,
                stride: s,
                pad: p,
            })
            .collect();
        let text = TextEncoderVars {
            embed: leaf(tape, "encoders.text.embed"),
            forward: LstmVars {
                w_ih: leaf(tape, "encoders.text.fwd.w_ih"),
                w_hh: leaf(tape, "encoders.text.fwd.w_hh"),
                bias: leaf(tape, "encoders.text.fwd.bias"),
            },
            backward: LstmVars {
                w_ih: leaf(tape, "encoders.text.bwd.w_ih"),
                w_hh: leaf(tape, "encoders.text.bwd.w_hh"),
                bias: leaf(tape, "encoders.text.bwd.bias"),
            },
        };
        let global_proj = (leaf(tape, "global.proj.weight"), leaf(tape, "global.proj.bias"));
        let wam = (leaf(tape, "pfl.wam.weight"), leaf(tape, "pfl.wam.bias"));
        let k = self.config.k_parts;
        let part_proj = (0..k)
            .map(|p| {
                (
                    leaf(tape, &format!("pfl.part{p}.weight")),
                    leaf(tape, &format!("pfl.part{p}.bias")),
                )
            })
            .collect();
        let mvnln = MvNlnVars {
            theta: (0..k).map(|p| leaf(tape, &format!("prl.theta{p}.weight"))).collect(),
            phi: (0..k).map(|p| leaf(tape, &format!("prl.phi{p}.weight"))).collect(),
            gamma_w: (0..k).map(|p| leaf(tape, &format!("prl.gamma{p}.weight"))).collect(),
            gamma_b: (0..k).map(|p| leaf(tape, &format!("prl.gamma{p}.bias"))).collect(),
            out_w: (0..k).map(|p| leaf(tape, &format!("prl.out{p}.weight"))).collect(),
            out_b: (0..k).map(|p| leaf(tape, &format!("prl.out{p}.bias"))).collect(),
        };
        let id_global = (
            leaf(tape, "losses.id.global.weight"),
            leaf(tape, "losses.id.global.bias"),
        );
        let id_pfl = (0..k)
            .map(|p| {
                (
                    leaf(tape, &format!("losses.id.pfl{p}.weight")),
                    leaf(tape, &format!("losses.id.pfl{p}.bias")),
                )
            })
            .collect();
        let id_prl = (0..k)
            .map(|p| {
                (
                    leaf(tape, &format!("losses.id.prl{p}.weight")),
                    leaf(tape, &format!("losses.id.prl{p}.bias")),
                )
            })
            .collect();
        ModelVars {
            conv,
            text,
            global_proj,
            wam,
            part_proj,
            mvnln,
            id_global,
            id_pfl,
            id_prl,
            named,
        }
    }

    /// Full visual path: encoder -> global branch, PFL, PRL.
    pub fn forward_visual(&self, tape: &mut Tape, vars: &ModelVars, image: &Array3<f64>) -> Result<BundleVars> {
        let f = encoders::encode_image(tape, &vars.conv, &self.config.visual, image)?;
        let pooled = global_branch::pool_visual_global(tape, f);
        let global = global_branch::project_global(tape, vars.global_proj.0, vars.global_proj.1, pooled);
        let slices = encoders::partition(tape, f, self.config.k_parts);
        let parts: Vec<Var> = slices
            .iter()
            .zip(&vars.part_proj)
            .map(|(&slice, &(w, b))| pfl::part_feature_visual(tape, w, b, slice))
            .collect();
        let relations = prl::mv_nln(tape, &vars.mvnln, &parts)?;
        let parts_concat = tape.concat_rows(&parts);
        let relations_concat = tape.concat_rows(&relations);
        Ok(BundleVars {
            global,
            parts,
            relations,
            parts_concat,
            relations_concat,
        })
    }

    /// Full textual path. Also returns the `(K, n)` WAM score matrix.
    pub fn forward_text(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        caption: &TokenizedCaption,
    ) -> Result<(BundleVars, Var)> {
        let xs = encoders::embed_words(tape, vars.text.embed, caption)?;
        let word_bank = encoders::encode_text(tape, &vars.text, &xs, self.config.hidden());
        let valid = caption.valid_len();
        let pooled = global_branch::pool_text_global(tape, word_bank, valid)?;
        let global = global_branch::project_global(tape, vars.global_proj.0, vars.global_proj.1, pooled);
        let scores = pfl::word_attention(tape, vars.wam.0, vars.wam.1, word_bank);
        let parts: Vec<Var> = vars
            .part_proj
            .iter()
            .enumerate()
            .map(|(k, &(w, b))| {
                let weighted = pfl::weight_text(tape, word_bank, scores, k);
                pfl::part_feature_text(tape, w, b, weighted, valid)
            })
            .collect::<Result<_>>()?;
        let relations = prl::mv_nln(tape, &vars.mvnln, &parts)?;
        let parts_concat = tape.concat_rows(&parts);
        let relations_concat = tape.concat_rows(&relations);
        Ok((
            BundleVars {
                global,
                parts,
                relations,
                parts_concat,
                relations_concat,
            },
            scores,
        ))
    }

    /// Forward one image-text pair on a fresh tape and return plain bundles.
    pub fn forward_pair(
        &self,
        image: &Array3<f64>,
        caption: &TokenizedCaption,
    ) -> Result<(FeatureBundle, FeatureBundle)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let visual = self.forward_visual(&mut tape, &vars, image)?;
        let (textual, _) = self.forward_text(&mut tape, &vars, caption)?;
        Ok((extract(&tape, &visual), extract(&tape, &textual)))
    }

    /// Apply gradients into a name-keyed map.
    pub fn collect_gradients(&self, vars: &ModelVars, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        vars.named
            .iter()
            .map(|(name, var)| {
                let shape = self.params[name].shape().to_vec();
                (name.clone(), grads.get(*var, &shape))
            })
            .collect()
    }
}

/// Copy a bundle's values off the tape.
pub fn extract(tape: &Tape, bundle: &BundleVars) -> FeatureBundle {
    let take = |v: Var| tape.value(v).iter().copied().collect::<Vec<f64>>();
    FeatureBundle {
        global: take(bundle.global),
        parts_concat: take(bundle.parts_concat),
        relations_concat: take(bundle.relations_concat),
    }
}
