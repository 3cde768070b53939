//! The MedNeXt-v2 macro-architecture.
//!
//! Stem (1×1×1 conv) → four encoder stages of ConvNeXt blocks, each
//! followed by a stride-2 down block → bottleneck → four decoder stages,
//! each preceded by a stride-2 transposed up block and an additive skip
//! from the matching encoder stage → 1×1×1 heads on the supervised decoder
//! levels.
//!
//! Every block runs `depthwise conv → instance norm → pointwise expansion
//! (×R) → GELU → GRN → pointwise compression` and adds a residual. Down and
//! up blocks stride the depthwise conv (transposed for up), change the width
//! by 2×, and project the residual with a kernel-1 strided conv.

mod checkpoint;
mod config;

pub use checkpoint::{
    load_backbone, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ParamEntry,
    CHECKPOINT_FORMAT,
};
pub use config::{layouts, scale_config, NetworkConfig, ScaleVariant, LAYOUT_LEN, SPATIAL_MULTIPLE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{contract, Result};
use crate::ops::{ConvSpec, GRN_EPS, INSTANCE_NORM_EPS};
use crate::tensor::{dims5, Element, Tensor};

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    spec: ConvSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    Plain,
    Down,
    Up,
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    depthwise: ConvLayer,
    norm: (usize, usize),
    expand: ConvLayer,
    grn: Option<(usize, usize)>,
    compress: ConvLayer,
    residual: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
struct Plan {
    stem: ConvLayer,
    encoder: Vec<Vec<Block>>,
    down: Vec<Block>,
    bottleneck: Vec<Block>,
    up: Vec<Block>,
    /// Indexed by stage (0 = full resolution).
    decoder: Vec<Vec<Block>>,
    /// `heads[k]` reads the stage-`k` decoder output (stage 4 = bottleneck).
    heads: Vec<ConvLayer>,
}

/// Observer for named intermediate feature maps during forward.
pub type Hook<'h, T> = &'h mut dyn FnMut(&str, &Tensor<T>);

/// A built network: named parameters plus the layer plan that reads them.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    plan: Plan,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Element> Builder<T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::cst(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::from_vec(shape, data).expect("consistent shape")
    }

    fn conv(&mut self, name: &str, spec: ConvSpec) -> ConvLayer {
        let ws = spec.weight_shape();
        let fan_in = (ws[1] * ws[2] * ws[3] * ws[4]) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = self.uniform(ws.to_vec(), bound);
        let b = self.uniform(vec![spec.out_channels], bound);
        ConvLayer {
            weight: self.push(format!("{name}.weight"), w),
            bias: self.push(format!("{name}.bias"), b),
            spec,
        }
    }

    fn affine(&mut self, name: &str, channels: usize, gamma: f64) -> (usize, usize) {
        let g = self.push(
            format!("{name}.gamma"),
            Tensor::filled(vec![channels], T::cst(gamma)),
        );
        let b = self.push(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        (g, b)
    }

    fn block(
        &mut self,
        name: String,
        kind: BlockKind,
        in_ch: usize,
        ratio: usize,
        cfg: &NetworkConfig,
    ) -> Block {
        let k = cfg.kernel;
        let out_ch = match kind {
            BlockKind::Plain => in_ch,
            BlockKind::Down => in_ch * 2,
            BlockKind::Up => in_ch / 2,
        };
        let dw_spec = match kind {
            BlockKind::Plain => ConvSpec::depthwise(in_ch, k),
            BlockKind::Down => ConvSpec::depthwise(in_ch, k).with_stride(2),
            BlockKind::Up => ConvSpec::depthwise(in_ch, k).with_stride(2).transposed(),
        };
        let hidden = in_ch * ratio;
        let depthwise = self.conv(&format!("{name}.dw"), dw_spec);
        let norm = self.affine(&format!("{name}.norm"), in_ch, 1.0);
        let expand = self.conv(&format!("{name}.expand"), ConvSpec::pointwise(in_ch, hidden));
        let grn = cfg
            .grn
            .then(|| self.affine(&format!("{name}.grn"), hidden, 0.0));
        let compress = self.conv(
            &format!("{name}.compress"),
            ConvSpec::pointwise(hidden, out_ch),
        );
        let residual = match kind {
            BlockKind::Plain => None,
            BlockKind::Down => Some(self.conv(
                &format!("{name}.res"),
                ConvSpec::pointwise(in_ch, out_ch).with_stride(2),
            )),
            BlockKind::Up => Some(self.conv(
                &format!("{name}.res"),
                ConvSpec::pointwise(in_ch, out_ch).with_stride(2).transposed(),
            )),
        };
        Block {
            name,
            depthwise,
            norm,
            expand,
            grn,
            compress,
            residual,
        }
    }
}

/// Instantiates a network with seeded uniform fan-in initialization, unit
/// norm scales, and zero GRN parameters.
pub fn build_network<T: Element>(config: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let cfg = config;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        names: Vec::new(),
        params: Vec::new(),
    };
    let blocks = &cfg.stage_blocks;
    let ratios = &cfg.expansion_ratios;
    let stem = b.conv("stem", ConvSpec::pointwise(cfg.in_channels, cfg.base_channels));

    let mut encoder = Vec::new();
    let mut down = Vec::new();
    for s in 0..4 {
        let w = cfg.stage_width(s);
        encoder.push(
            (0..blocks[s])
                .map(|j| b.block(format!("enc{s}.block{j}"), BlockKind::Plain, w, ratios[s], cfg))
                .collect(),
        );
        down.push(b.block(format!("down{s}"), BlockKind::Down, w, ratios[s + 1], cfg));
    }
    let bottleneck = (0..blocks[4])
        .map(|j| {
            b.block(
                format!("bottleneck.block{j}"),
                BlockKind::Plain,
                cfg.stage_width(4),
                ratios[4],
                cfg,
            )
        })
        .collect();

    let mut up = vec![None, None, None, None];
    let mut decoder = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for s in (0..4).rev() {
        let idx = 8 - s;
        up[s] = Some(b.block(
            format!("up{s}"),
            BlockKind::Up,
            cfg.stage_width(s + 1),
            ratios[idx],
            cfg,
        ));
        decoder[s] = (0..blocks[idx])
            .map(|j| {
                b.block(
                    format!("dec{s}.block{j}"),
                    BlockKind::Plain,
                    cfg.stage_width(s),
                    ratios[idx],
                    cfg,
                )
            })
            .collect();
    }
    let heads = (0..cfg.deep_supervision_levels)
        .map(|k| {
            b.conv(
                &format!("head{k}"),
                ConvSpec::pointwise(cfg.stage_width(k), cfg.num_classes),
            )
        })
        .collect();

    Ok(Network {
        config: config.clone(),
        names: b.names,
        params: b.params,
        plan: Plan {
            stem,
            encoder,
            down,
            bottleneck,
            up: up.into_iter().map(|u| u.expect("built")).collect(),
            decoder,
            heads,
        },
    })
}

/// Total number of scalar parameters.
pub fn count_parameters<T: Copy>(params: &[Tensor<T>]) -> usize {
    params.iter().map(|p| p.len()).sum()
}

fn conv_apply<'g, T: Element>(
    layer: &ConvLayer,
    p: &[Var<'g, T>],
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    x.conv3d(p[layer.weight], Some(p[layer.bias]), &layer.spec)
}

impl<T: Element> Network<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        count_parameters(&self.params)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// True for parameters of the segmentation heads.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head")
    }

    /// Registers every parameter on `g`, trainable or constant.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Vec<Var<'g, T>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// Same weights with every GRN layer removed.
    pub fn without_grn(&self) -> Network<T> {
        let mut cfg = self.config.clone();
        cfg.grn = false;
        let mut stripped = build_network::<T>(&cfg, 0).expect("valid config");
        for (name, value) in stripped.names.iter().zip(stripped.params.iter_mut()) {
            let idx = self.param_index(name).expect("shared parameter");
            *value = self.params[idx].clone();
        }
        stripped
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        contract!(
            shape.len() == 5,
            "input must be [B, C, D, H, W], got {:?}",
            shape
        );
        contract!(
            shape[1] == self.config.in_channels,
            "input has {} channels, network expects {}",
            shape[1],
            self.config.in_channels
        );
        for (axis, &n) in ["D", "H", "W"].iter().zip(&shape[2..]) {
            contract!(
                n > 0 && n % SPATIAL_MULTIPLE == 0,
                "spatial extent {n} along axis {axis} is not a positive multiple of {SPATIAL_MULTIPLE}"
            );
        }
        Ok(())
    }

    fn run_block<'g>(
        &self,
        block: &Block,
        p: &[Var<'g, T>],
        x: Var<'g, T>,
        hook: &mut Option<Hook<'_, T>>,
    ) -> Result<Var<'g, T>> {
        let h = conv_apply(&block.depthwise, p, x)?;
        let h = h.instance_norm(p[block.norm.0], p[block.norm.1], INSTANCE_NORM_EPS)?;
        let h = conv_apply(&block.expand, p, h)?.gelu();
        if let Some(f) = hook.as_mut() {
            f(&format!("{}.mlp", block.name), &h.value());
        }
        let h = match block.grn {
            Some((gamma, beta)) => h.grn(p[gamma], p[beta], self.config.grn_divisor, GRN_EPS)?,
            None => h,
        };
        let h = conv_apply(&block.compress, p, h)?;
        let skip = match &block.residual {
            Some(r) => conv_apply(r, p, x)?,
            None => x,
        };
        let out = h.add(skip)?;
        if let Some(f) = hook.as_mut() {
            f(&block.name, &out.value());
        }
        Ok(out)
    }

    fn run_stage<'g>(
        &self,
        blocks: &[Block],
        stage: &str,
        p: &[Var<'g, T>],
        mut x: Var<'g, T>,
        hook: &mut Option<Hook<'_, T>>,
    ) -> Result<Var<'g, T>> {
        for b in blocks {
            x = self.run_block(b, p, x, hook)?;
        }
        if let Some(f) = hook.as_mut() {
            f(stage, &x.value());
        }
        Ok(x)
    }

    /// Forward pass on bound parameters. Returns `deep_supervision_levels`
    /// logit maps, full resolution first; the `k`-th is downsampled by `2^k`.
    ///
    /// The hook, if any, sees `stem`, every block (`enc0.block0`, `down1`,
    /// `up2`, ...), its expanded activation (`<block>.mlp`), and every stage
    /// output (`enc0`..`enc3`, `bottleneck`, `dec3`..`dec0`).
    pub fn forward_with_hook<'g>(
        &self,
        params: &[Var<'g, T>],
        input: Var<'g, T>,
        mut hook: Option<Hook<'_, T>>,
    ) -> Result<Vec<Var<'g, T>>> {
        contract!(
            params.len() == self.params.len(),
            "expected {} bound parameters, got {}",
            self.params.len(),
            params.len()
        );
        self.check_input(&input.shape())?;
        let plan = &self.plan;
        let mut x = conv_apply(&plan.stem, params, input)?;
        if let Some(f) = hook.as_mut() {
            f("stem", &x.value());
        }
        let mut skips = Vec::with_capacity(4);
        for s in 0..4 {
            x = self.run_stage(&plan.encoder[s], &format!("enc{s}"), params, x, &mut hook)?;
            skips.push(x);
            x = self.run_block(&plan.down[s], params, x, &mut hook)?;
        }
        x = self.run_stage(&plan.bottleneck, "bottleneck", params, x, &mut hook)?;

        let levels = self.config.deep_supervision_levels;
        let mut outputs: Vec<Option<Var<'g, T>>> = vec![None; levels];
        if levels == 5 {
            outputs[4] = Some(conv_apply(&plan.heads[4], params, x)?);
        }
        for s in (0..4).rev() {
            x = self.run_block(&plan.up[s], params, x, &mut hook)?;
            x = x.add(skips[s])?;
            x = self.run_stage(&plan.decoder[s], &format!("dec{s}"), params, x, &mut hook)?;
            if s < levels {
                outputs[s] = Some(conv_apply(&plan.heads[s], params, x)?);
            }
        }
        Ok(outputs.into_iter().map(|o| o.expect("head")).collect())
    }

    pub fn forward<'g>(&self, params: &[Var<'g, T>], input: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        self.forward_with_hook(params, input, None)
    }

    /// Inference-only forward returning the logit tensors.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        dims5(input)?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        let x = g.constant(input.clone());
        let outs = self.forward(&p, x)?;
        Ok(outs.iter().map(|o| o.value().clone()).collect())
    }

    /// Full-resolution logits only.
    pub fn predict_full(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict(input)?.swap_remove(0))
    }

    /// Captures the named intermediate feature map during a forward pass.
    pub fn probe(&self, input: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.bind(&g, false);
        let x = g.constant(input.clone());
        let mut found = None;
        let mut hook = |name: &str, t: &Tensor<T>| {
            if name == layer && found.is_none() {
                found = Some(t.clone());
            }
        };
        self.forward_with_hook(&p, x, Some(&mut hook))?;
        found.ok_or_else(|| crate::Error::Contract(format!("unknown layer `{layer}`")))
    }

    /// Names accepted by [`Network::probe`].
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["stem".to_string()];
        let block_names = |blocks: &[Block], names: &mut Vec<String>| {
            for b in blocks {
                names.push(b.name.clone());
                names.push(format!("{}.mlp", b.name));
            }
        };
        for s in 0..4 {
            block_names(&self.plan.encoder[s], &mut names);
            names.push(format!("enc{s}"));
            block_names(std::slice::from_ref(&self.plan.down[s]), &mut names);
        }
        block_names(&self.plan.bottleneck, &mut names);
        names.push("bottleneck".into());
        for s in (0..4).rev() {
            block_names(std::slice::from_ref(&self.plan.up[s]), &mut names);
            block_names(&self.plan.decoder[s], &mut names);
            names.push(format!("dec{s}"));
        }
        names
    }

    /// Replaces all parameter values; shapes must match exactly.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        contract!(
            values.len() == self.params.len(),
            "expected {} parameters, got {}",
            self.params.len(),
            values.len()
        );
        for (i, v) in values.iter().enumerate() {
            contract!(
                v.shape() == self.params[i].shape(),
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[i],
                self.params[i].shape(),
                v.shape()
            );
        }
        self.params = values;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            plan: self.plan.clone(),
        }
    }
}
