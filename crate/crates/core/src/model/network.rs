use crate::autodiff::{Graph, Segments, Var};
use crate::dynamic::{global_multiscale_pool, DkConv, MultiScaleDk};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::nn::{
    BatchNorm, BnStats, Conv, Ctx, DenseLayer, DtdnnLayer, Init, Mode, ParamId, ParamKind,
    ParamStore, TdnnLayer, Temporal, TransitionLayer,
};
use crate::rng;
use crate::tensor::Tensor;

/// One dense block and the transition that follows it.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DtdnnLayer>,
    pub transition: TransitionLayer,
}

/// The assembled network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub tdnn: TdnnLayer,
    pub blocks: Vec<DenseBlock>,
    pub embedding: DenseLayer,
    pub embedding_bn: BatchNorm,
    /// Class weights `[embedding_dim × num_classes]`, normalized per class at use.
    pub head: ParamId,
}

/// Embeddings and cosine logits of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Pooled statistics, `[pool_dim × segments]`.
    pub pooled: Var,
    /// `[embedding_dim × segments]`.
    pub embedding: Var,
    /// Cosine similarity to every class, `[segments × num_classes]`.
    pub cosine: Var,
}

/// Per-layer trainable parameter counts, in build order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<(String, usize)>,
}

impl ParamTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|(_, n)| n).sum()
    }
}

impl Model {
    /// Builds the network; identical `(config, seed)` give identical weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng::stream(seed, "init", 0);
        let mut init = Init::new(&mut params, &mut rng);
        let cfg = config;
        let k = cfg.kernel;

        let tdnn = TdnnLayer::new(
            &mut init,
            "tdnn",
            cfg.input_dim,
            cfg.tdnn_channels,
            k,
            cfg.dilation_for(cfg.tdnn_context)?,
        )?;
        let mut width = cfg.tdnn_channels;
        let mut index = 0;
        let mut blocks = Vec::with_capacity(cfg.block_sizes.len());
        for (b, &size) in cfg.block_sizes.iter().enumerate() {
            let mut layers = Vec::with_capacity(size);
            for l in 0..size {
                let label = format!("block{}.layer{}", b + 1, l + 1);
                let dynamic = cfg.variant.dynamic_kernels() && index < cfg.dynamic_layers;
                let layer = if dynamic && cfg.variant.local_multiscale() {
                    DtdnnLayer::new(&mut init, &label, width, cfg.growth, |init, layer, w| {
                        Ok(Temporal::MultiScale(MultiScaleDk::new(
                            init,
                            layer,
                            "multiscale",
                            w,
                            cfg.scales,
                            k,
                            cfg.reduction,
                        )?))
                    })?
                } else if dynamic {
                    DtdnnLayer::new(
                        &mut init,
                        &label,
                        width,
                        cfg.bottleneck,
                        |init, layer, w| {
                            Ok(Temporal::Dynamic(DkConv::new(
                                init,
                                layer,
                                "dkconv",
                                w,
                                cfg.growth,
                                k,
                                cfg.reduction,
                            )?))
                        },
                    )?
                } else {
                    let dilation = cfg.dilation_for(cfg.layer_context(index))?;
                    DtdnnLayer::new(
                        &mut init,
                        &label,
                        width,
                        cfg.bottleneck,
                        |init, layer, w| {
                            Ok(Temporal::Conv(Conv::new(
                                init, layer, "conv", w, cfg.growth, k, dilation,
                            )?))
                        },
                    )?
                };
                width = layer.out_dim();
                layers.push(layer);
                index += 1;
            }
            let out = width / 2;
            if out == 0 {
                return Err(Error::Config(format!(
                    "transition {} would have no channels",
                    b + 1
                )));
            }
            let transition =
                TransitionLayer::new(&mut init, &format!("transition{}", b + 1), width, out)?;
            width = out;
            blocks.push(DenseBlock { layers, transition });
        }

        let pool_dim = 2 * Self::tap_widths(cfg, &blocks).iter().sum::<usize>();
        let embedding = DenseLayer::new(
            &mut init,
            "embedding",
            "dense",
            pool_dim,
            cfg.embedding_dim,
            false,
        )?;
        let embedding_bn = BatchNorm::new(&mut init, "embedding", "bn", cfg.embedding_dim)?
            .with_train_stats(BnStats::Running);
        let head = init.uniform(
            "head",
            "weight",
            &[cfg.embedding_dim, cfg.num_classes],
            cfg.embedding_dim,
        )?;
        Ok(Model {
            config: config.clone(),
            params,
            tdnn,
            blocks,
            embedding,
            embedding_bn,
            head,
        })
    }

    fn tap_widths(cfg: &ModelConfig, blocks: &[DenseBlock]) -> Vec<usize> {
        if cfg.variant.global_pooling() {
            cfg.pool_taps
                .iter()
                .map(|&t| blocks[t - 1].transition.dense.out_dim)
                .collect()
        } else {
            vec![blocks.last().map_or(0, |b| b.transition.dense.out_dim)]
        }
    }

    /// Width of the pooled statistics vector.
    pub fn pool_dim(&self) -> usize {
        2 * Self::tap_widths(&self.config, &self.blocks)
            .iter()
            .sum::<usize>()
    }

    /// Binds the parameters on `graph` and returns a context for a forward
    /// pass in `mode`.
    pub fn context<'g>(&self, graph: &'g mut Graph, mode: Mode) -> Ctx<'g> {
        let vars = match mode {
            Mode::Train => self.params.bind(graph),
            Mode::Infer => self.params.bind_frozen(graph),
        };
        Ctx::new(graph, vars, mode)
    }

    /// Runs the network on a packed batch `x: [input_dim × ΣT]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, segs: &Segments) -> Result<ModelOutput> {
        let rows = cx.graph.shape(x)[0];
        if rows != self.config.input_dim {
            return Err(Error::Dimension {
                op: "model_forward",
                lhs: vec![self.config.input_dim],
                rhs: cx.graph.shape(x).to_vec(),
            });
        }
        let mut h = self.tdnn.forward(cx, x, segs)?;
        let mut transitions = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for layer in &block.layers {
                h = layer.forward(cx, h, segs)?;
            }
            h = block.transition.forward(cx, h)?;
            transitions.push(h);
        }
        let taps: Vec<Var> = if self.config.variant.global_pooling() {
            self.config
                .pool_taps
                .iter()
                .map(|&t| transitions[t - 1])
                .collect()
        } else {
            vec![h]
        };
        let pooled = global_multiscale_pool(cx.graph, &taps, segs)?;
        let e = self.embedding.forward(cx, pooled)?;
        let embedding = self.embedding_bn.forward(cx, e)?;
        let cosine = self.cosine(cx, embedding)?;
        Ok(ModelOutput {
            pooled,
            embedding,
            cosine,
        })
    }

    /// Cosine similarity between each embedding column and each class weight.
    pub fn cosine(&self, cx: &mut Ctx, embedding: Var) -> Result<Var> {
        let w = cx.param(self.head);
        let g = &mut *cx.graph;
        let e = g.transpose(embedding)?;
        let e2 = g.mul(e, e)?;
        let en = g.sum_axis(e2, 1)?;
        let en = g.sqrt(en)?;
        let e = g.div(e, en)?;
        let w2 = g.mul(w, w)?;
        let wn = g.sum_axis(w2, 0)?;
        let wn = g.sqrt(wn)?;
        let w = g.div(w, wn)?;
        g.matmul(e, w)
    }

    /// Softmax over `aam_scale · cos`, one row per segment.
    pub fn scores(&self, cx: &mut Ctx, cosine: Var) -> Result<Var> {
        let logits = cx.graph.scale(cosine, self.config.aam_scale)?;
        cx.graph.softmax(logits, 1)
    }

    /// Scores one utterance `[input_dim × T]` in inference mode.
    pub fn score_utterance(&self, features: &Tensor) -> Result<Vec<f64>> {
        let (_, frames) = features.dims2()?;
        let mut graph = Graph::new();
        let mut cx = self.context(&mut graph, Mode::Infer);
        let x = cx.graph.constant(features.clone());
        let out = self.forward(&mut cx, x, &Segments::single(frames))?;
        let scores = self.scores(&mut cx, out.cosine)?;
        Ok(cx.graph.value(scores).data().to_vec())
    }

    /// Trainable scalars per layer, excluding running statistics.
    pub fn count_params(&self) -> ParamTable {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for e in self.params.entries() {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            match rows.last_mut() {
                Some((layer, n)) if *layer == e.layer => *n += e.tensor.numel(),
                _ => rows.push((e.layer.clone(), e.tensor.numel())),
            }
        }
        ParamTable { rows }
    }

    /// Structural count from the layer objects, independent of the store.
    pub fn structural_param_count(&self) -> usize {
        self.tdnn.param_count()
            + self
                .blocks
                .iter()
                .map(|b| {
                    b.layers.iter().map(DtdnnLayer::param_count).sum::<usize>()
                        + b.transition.param_count()
                })
                .sum::<usize>()
            + self.embedding.param_count()
            + self.embedding_bn.param_count()
            + self.config.embedding_dim * self.config.num_classes
    }
}
