//! The full model: embeddings, shared bottom, gated experts, towers and heads.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::embedding::{
    assemble_input, positions_injective, standin_image_projection, standin_text_table, EmbeddingTables,
    ImagePatchGrid, InputSequence, ItemBlock, Providers, Segment, TextTokenSequence, IMAGE_PROVIDER_PROJECTION,
    NUM_BLOCK_TYPES, NUM_SEGMENTS, TEXT_PROVIDER_TABLE,
};
use crate::encoder::{scaled_uniform, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::moe::{
    gate_forward, moe_forward, shared_bottom, tower_forward, ExpertCache, ExpertParams, GateNetwork, MoeConfig,
    Towers,
};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, DetRng};
use crate::tasks::{head_forward, CvrHead, HeadParams, Task};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub moe: MoeConfig,
    pub max_text_len: usize,
    pub max_patch_len: usize,
    /// Pixels per image patch (height × width × channels).
    pub patch_pixels: usize,
    pub vocab_size: usize,
    pub num_users: usize,
    pub num_contexts: usize,
    pub cvr_head: CvrHead,
    /// Seed for trainable parameter initialization.
    pub init_seed: u64,
    /// Seed for the frozen stand-in providers.
    pub provider_seed: u64,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.moe.validate()?;
        if self.encoder.dropout_rate != 0.0 {
            return Err(Error::contract("the model forward pass does not apply dropout; set dropout_rate to 0"));
        }
        if self.max_text_len == 0 || self.max_patch_len == 0 || self.patch_pixels == 0 {
            return Err(Error::contract("sequence limits and patch size must be positive"));
        }
        if self.vocab_size == 0 || self.num_users == 0 || self.num_contexts == 0 {
            return Err(Error::contract("vocabulary, user and context counts must be positive"));
        }
        Ok(())
    }
}

/// Frozen provider outputs for one item: `n_T × d` text rows and `n_P × d`
/// patch rows (absent when the modality is empty).
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatures {
    pub text: Option<Tensor>,
    pub image: Option<Tensor>,
}

/// An item as seen by the model. Text and image may come from different
/// catalog items (alignment negatives).
#[derive(Debug, Clone, Copy)]
pub struct ItemView<'a> {
    pub text: Option<&'a Tensor>,
    pub image: Option<&'a Tensor>,
}

impl<'a> ItemView<'a> {
    pub fn of(item: &'a ItemFeatures) -> Self {
        ItemView { text: item.text.as_ref(), image: item.image.as_ref() }
    }

    pub fn mixed(text_from: &'a ItemFeatures, image_from: &'a ItemFeatures) -> Self {
        ItemView { text: text_from.text.as_ref(), image: image_from.image.as_ref() }
    }
}

/// One model input before embedding.
#[derive(Debug, Clone)]
pub struct ExampleInput<'a> {
    /// `(user id, context id)` of the other-feature block, if present.
    pub other: Option<(usize, usize)>,
    pub behavior: Vec<ItemView<'a>>,
    pub target: ItemView<'a>,
}

/// Intermediate values of one forward pass. Per-task slots are filled only
/// for the requested tasks.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: InputSequence,
    /// Assembled input plus block-type embeddings; what the shared bottom and
    /// the gates consume.
    pub e_input: Var,
    pub shared: Var,
    pub gates: [Option<Var>; 3],
    pub mixtures: [Option<Var>; 3],
    pub towers: [Option<Var>; 3],
    pub probs: [Option<Var>; 3],
    pub expert_evaluations: usize,
}

#[derive(Debug, Clone)]
struct ModelIds {
    tables: EmbeddingTables,
    shared: EncoderParams,
    experts: Vec<ExpertParams>,
    gates: GateNetwork,
    towers: Towers,
    heads: [HeadParams; 3],
}

/// The multi-task model with its parameters.
#[derive(Debug, Clone)]
pub struct CameNN {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: ModelIds,
}

fn small_uniform(rng: &mut DetRng, rows: usize, d: usize) -> Tensor {
    let data = (0..rows * d).map(|_| rng::uniform(rng, -0.1, 0.1)).collect();
    Tensor::from_parts(vec![rows, d], data)
}

impl CameNN {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let mut rng = rng::stream(config.init_seed, 0x1417);
        let mut params = ParamStore::new();

        params.insert(
            TEXT_PROVIDER_TABLE,
            standin_text_table(config.vocab_size, d, config.provider_seed),
            false,
        )?;
        params.insert(
            IMAGE_PROVIDER_PROJECTION,
            standin_image_projection(config.patch_pixels, d, config.provider_seed),
            false,
        )?;

        let text_pos = small_uniform(&mut rng, config.max_text_len, d);
        let image_pos = small_uniform(&mut rng, config.max_patch_len, d);
        if !positions_injective(&text_pos) || !positions_injective(&image_pos) {
            return Err(Error::contract("position embeddings are not injective"));
        }
        params.insert(EmbeddingTables::TEXT_POSITION, text_pos, true)?;
        params.insert(EmbeddingTables::IMAGE_POSITION, image_pos, true)?;
        params.insert(EmbeddingTables::SEGMENT, small_uniform(&mut rng, NUM_SEGMENTS, d), true)?;
        params.insert(EmbeddingTables::CLS, small_uniform(&mut rng, 1, d), true)?;
        params.insert(EmbeddingTables::SEP, small_uniform(&mut rng, 1, d), true)?;
        params.insert(EmbeddingTables::BLOCK_TYPE, small_uniform(&mut rng, NUM_BLOCK_TYPES, d), true)?;
        params.insert(EmbeddingTables::USER, small_uniform(&mut rng, config.num_users, d), true)?;
        params.insert(EmbeddingTables::CONTEXT, small_uniform(&mut rng, config.num_contexts, d), true)?;

        EncoderParams::init(&mut params, "shared", &config.encoder, &mut rng)?;
        for j in 0..config.moe.num_experts {
            ExpertParams::init(&mut params, j, config.moe.expert_kind, &config.encoder, &mut rng)?;
        }
        GateNetwork::init(&mut params, &config.moe, d, &mut rng)?;
        Towers::init(&mut params, &config.encoder, &mut rng)?;
        for task in Task::ALL {
            params.insert(&HeadParams::weight_name(task), scaled_uniform(&mut rng, d, 1), true)?;
            params.insert(&HeadParams::bias_name(task), Tensor::zeros(&[1]), true)?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter store, e.g. one read from a checkpoint.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = ModelIds {
            tables: EmbeddingTables::resolve(&params)?,
            shared: EncoderParams::resolve(&params, "shared", &config.encoder)?,
            experts: (0..config.moe.num_experts)
                .map(|j| ExpertParams::resolve(&params, j, config.moe.expert_kind, &config.encoder))
                .collect::<Result<_>>()?,
            gates: GateNetwork::resolve(&params, &config.moe)?,
            towers: Towers::resolve(&params, &config.encoder)?,
            heads: [
                HeadParams::resolve(&params, Task::Ita)?,
                HeadParams::resolve(&params, Task::Tia)?,
                HeadParams::resolve(&params, Task::Cvr)?,
            ],
        };
        let model = CameNN { config, params, ids };
        let d = config.d_model();
        let providers = model.providers()?;
        if providers.text_table.cols() != d || providers.image_projection.cols() != d {
            return Err(Error::contract("provider output width differs from d_model"));
        }
        Ok(model)
    }

    pub fn providers(&self) -> Result<Providers<'_>> {
        Providers::from_params(&self.params)
    }

    pub fn tables(&self) -> &EmbeddingTables {
        &self.ids.tables
    }

    pub fn experts(&self) -> &[ExpertParams] {
        &self.ids.experts
    }

    pub fn gates(&self) -> &GateNetwork {
        &self.ids.gates
    }

    pub fn towers(&self) -> &Towers {
        &self.ids.towers
    }

    pub fn shared_params(&self) -> &EncoderParams {
        &self.ids.shared
    }

    pub fn head(&self, task: Task) -> &HeadParams {
        &self.ids.heads[task.index()]
    }

    /// Ids of every parameter that belongs to one task only: its gate, tower
    /// and head.
    pub fn task_param_ids(&self, task: Task) -> Vec<ParamId> {
        let gate = GateNetwork::name(task);
        let tower = EncoderParams::prefix(&Towers::scope(task));
        let head = HeadParams::prefix(task);
        self.params
            .iter()
            .filter(|(_, e)| e.name == gate || e.name.starts_with(&tower) || e.name.starts_with(&head))
            .map(|(id, _)| id)
            .collect()
    }

    /// Runs the frozen providers over one item.
    pub fn item_features(&self, tokens: &TextTokenSequence, grid: &ImagePatchGrid) -> Result<ItemFeatures> {
        if tokens.len() > self.config.max_text_len {
            return Err(Error::contract("text longer than max_text_len"));
        }
        if grid.len() > self.config.max_patch_len {
            return Err(Error::contract("more patches than max_patch_len"));
        }
        let providers = self.providers()?;
        Ok(ItemFeatures {
            text: providers.embed_text(tokens)?,
            image: providers.embed_patches(grid)?,
        })
    }

    /// Builds the assembled input sequence and adds block-type embeddings.
    pub fn embed(&self, tape: &mut Tape<'_>, example: &ExampleInput<'_>) -> Result<(InputSequence, Var)> {
        let t = self.ids.tables;
        let other = match example.other {
            Some((user, context)) => {
                let u = tape.embedding_lookup(t.user, &[user])?;
                let c = tape.embedding_lookup(t.context, &[context])?;
                let uc = tape.concat(&[u, c], 0)?;
                let seg = tape.embedding_lookup(t.segment, &[Segment::Other as usize; 2])?;
                Some(tape.add(uc, seg)?)
            }
            None => None,
        };
        let mut behavior = Vec::with_capacity(example.behavior.len());
        for item in &example.behavior {
            behavior.push(ItemBlock::encode(tape, &t, item.text, item.image)?);
        }
        let target = ItemBlock::encode(tape, &t, example.target.text, example.target.image)?;
        let input = assemble_input(tape, other, &behavior, &target)?;
        let types: Vec<usize> = input.block_types.iter().map(|&b| b as usize).collect();
        let type_rows = tape.embedding_lookup(t.block_type, &types)?;
        let e_input = tape.add(input.embeddings, type_rows)?;
        Ok((input, e_input))
    }

    /// Forward pass for the requested tasks.
    pub fn forward(&self, tape: &mut Tape<'_>, example: &ExampleInput<'_>, tasks: &[Task]) -> Result<Forward> {
        let enc = &self.config.encoder;
        let (input, e_input) = self.embed(tape, example)?;
        let shared = shared_bottom(tape, &self.ids.shared, enc, e_input)?;
        let mut cache = ExpertCache::new(self.config.moe.num_experts);
        let mut out = Forward {
            input,
            e_input,
            shared,
            gates: [None; 3],
            mixtures: [None; 3],
            towers: [None; 3],
            probs: [None; 3],
            expert_evaluations: 0,
        };
        for &task in tasks {
            let k = task.index();
            let gate = gate_forward(tape, &self.ids.gates, task, e_input)?;
            let mix = moe_forward(tape, &self.ids.experts, enc, self.config.moe.gating_mode, gate, shared, &mut cache)?;
            let tower = tower_forward(tape, &self.ids.towers, enc, task, mix)?;
            let prob = head_forward(tape, &self.ids.heads[k], task, tower, out.input.cls_index, self.config.cvr_head)?;
            out.gates[k] = Some(gate);
            out.mixtures[k] = Some(mix);
            out.towers[k] = Some(tower);
            out.probs[k] = Some(prob);
        }
        out.expert_evaluations = cache.evaluations();
        Ok(out)
    }

    /// Probability of `task` for one example.
    pub fn predict(&self, example: &ExampleInput<'_>, task: Task) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, example, &[task])?;
        Ok(tape.value(fwd.probs[task.index()].expect("requested task")).item())
    }

    /// Mean tower-input rows of `task` over the text positions and over the
    /// patch positions of one item presented alone. With `joint` both
    /// modalities share one forward pass; otherwise each is encoded without
    /// the other.
    pub fn modality_embeddings(
        &self,
        item: &ItemFeatures,
        task: Task,
        joint: bool,
    ) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
        let pooled = |view: ItemView<'_>, segment: Segment| -> Result<Option<Vec<f64>>> {
            let mut tape = Tape::new(&self.params);
            let example = ExampleInput { other: None, behavior: Vec::new(), target: view };
            let fwd = self.forward(&mut tape, &example, &[task])?;
            let rows = fwd.input.positions_of(0, segment);
            if rows.is_empty() {
                return Ok(None);
            }
            let mix = tape.value(fwd.mixtures[task.index()].expect("requested task"));
            let d = mix.cols();
            let mut out = vec![0.0; d];
            for &r in &rows {
                for (o, v) in out.iter_mut().zip(mix.row(r)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= rows.len() as f64);
            Ok(Some(out))
        };
        if joint {
            let view = ItemView::of(item);
            Ok((pooled(view, Segment::Text)?, pooled(view, Segment::Image)?))
        } else {
            let text = ItemView { text: item.text.as_ref(), image: None };
            let image = ItemView { text: None, image: item.image.as_ref() };
            Ok((pooled(text, Segment::Text)?, pooled(image, Segment::Image)?))
        }
    }
}
