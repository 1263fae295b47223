//! Typed, immutable view of a validated weight store.

use crate::error::Result;
use crate::model_io::{generate_random_model, Mode, ModelConfig, WeightStore};
use crate::tensor::Matrix;

/// Projection matrices are held input-major (`in x out`, the transpose of the
/// file layout) so that products stream them row by row.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub q_w: Matrix,
    pub q_b: Vec<f32>,
    pub k_w: Matrix,
    pub k_b: Vec<f32>,
    pub v_w: Matrix,
    pub v_b: Vec<f32>,
    pub o_w: Matrix,
    pub o_b: Vec<f32>,
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f32>,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
}

#[derive(Clone, Debug)]
pub enum Head {
    Classifier {
        pooler_w: Matrix,
        pooler_b: Vec<f32>,
        cls_w: Matrix,
        cls_b: Vec<f32>,
    },
    /// `None` ties the projection to the word embedding table.
    LanguageModel { lm_head: Option<Matrix> },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub word_emb: Matrix,
    pub pos_emb: Matrix,
    pub emb_ln_g: Vec<f32>,
    pub emb_ln_b: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub head: Head,
}

impl Model {
    /// Validates `store` against `config` and moves its tensors into typed
    /// fields.
    pub fn from_store(config: ModelConfig, mut store: WeightStore) -> Result<Self> {
        store.validate(&config)?;
        let mut mat = |name: &str| store.take(name).map(|t| t.into_matrix());
        let word_emb = mat("embed.word")?;
        let pos_emb = mat("embed.pos")?;
        let emb_ln_g = mat("embed.ln.g")?.into_data();
        let emb_ln_b = mat("embed.ln.b")?.into_data();
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut m = |suffix: &str| mat(&format!("enc.{l}.{suffix}"));
            layers.push(LayerWeights {
                q_w: m("att.q.w")?.transpose(),
                q_b: m("att.q.b")?.into_data(),
                k_w: m("att.k.w")?.transpose(),
                k_b: m("att.k.b")?.into_data(),
                v_w: m("att.v.w")?.transpose(),
                v_b: m("att.v.b")?.into_data(),
                o_w: m("att.o.w")?.transpose(),
                o_b: m("att.o.b")?.into_data(),
                ln1_g: m("ln1.g")?.into_data(),
                ln1_b: m("ln1.b")?.into_data(),
                ffn_w1: m("ffn.w1")?.transpose(),
                ffn_b1: m("ffn.b1")?.into_data(),
                ffn_w2: m("ffn.w2")?.transpose(),
                ffn_b2: m("ffn.b2")?.into_data(),
                ln2_g: m("ln2.g")?.into_data(),
                ln2_b: m("ln2.b")?.into_data(),
            });
        }
        let head = match config.mode {
            Mode::Encoder => Head::Classifier {
                pooler_w: mat("pooler.w")?.transpose(),
                pooler_b: mat("pooler.b")?.into_data(),
                cls_w: mat("cls.w")?.transpose(),
                cls_b: mat("cls.b")?.into_data(),
            },
            Mode::Decoder => Head::LanguageModel {
                lm_head: store.take("lm_head.w").ok().map(|t| t.into_matrix()),
            },
        };
        Ok(Model {
            config,
            word_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            head,
        })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let store = generate_random_model(&config, seed)?;
        Model::from_store(config, store)
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}
