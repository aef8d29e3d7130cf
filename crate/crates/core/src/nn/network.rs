//! The assembled five-stage encoder, feature aggregation, transfer MLRL and
//! FAF decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filters::hfdi_on;
use crate::nn::blocks::{Act, Forward, ParamBuilder};
use crate::nn::config::NetConfig;
use crate::ops::ConvOptions;
use crate::params::{BoundParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub store: ParamStore<f32>,
}

/// Encoder stage outputs and the head's probability map.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub encoder: [Var; 5],
    /// Deepest map after aggregation and transfer.
    pub bottleneck: Var,
    pub probs: Var,
}

pub fn stage_path(stage: usize) -> String {
    format!("stage{stage}")
}

pub fn build_network(cfg: &NetConfig, rng_seed: u64) -> Result<NetworkParams> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut b = ParamBuilder {
        store: &mut store,
        rng: &mut rng,
        cfg,
    };
    let ch = cfg.stage_channels;

    b.conv("stage1.conv1", 1, ch[0], 3, Act::NormRelu)?;
    b.conv("stage1.conv2", ch[0], ch[0], 3, Act::NormRelu)?;
    b.msda("stage1.msda1", ch[0])?;
    b.msda("stage1.msda2", ch[0])?;
    for stage in 2..=5 {
        let (c_in, c) = (ch[stage - 2], ch[stage - 1]);
        let p = stage_path(stage);
        b.downsample(&format!("{p}.down"), c_in, c)?;
        if stage == 2 && cfg.ablation.hfdi {
            b.conv(&format!("{p}.inject"), c + 3, c, 1, Act::NormRelu)?;
        }
        b.msda(&format!("{p}.msda1"), c)?;
        b.msda(&format!("{p}.msda2"), c)?;
    }
    if cfg.ablation.fa {
        b.fa("fa", &ch)?;
    }
    if cfg.ablation.mlrl_transfer {
        b.mlrl("transfer", ch[4], ch[4])?;
    }
    for stage in (1..=4).rev() {
        b.faf(&format!("decoder.faf{stage}"), ch[stage - 1], ch[stage])?;
    }
    b.conv("head", ch[0], 1, 1, Act::Linear)?;

    Ok(NetworkParams {
        config: cfg.clone(),
        store,
    })
}

pub fn check_input_shape(shape: crate::tensor::Shape) -> Result<()> {
    if shape.c != 1 {
        return Err(Error::invalid(
            "network_forward",
            format!("expects a single-channel image, got {shape}"),
        ));
    }
    if !shape.h.is_multiple_of(16) || !shape.w.is_multiple_of(16) || shape.h < 32 || shape.w < 32 {
        return Err(Error::invalid(
            "network_forward",
            format!("spatial size must be divisible by 16 and at least 32, got {shape}"),
        ));
    }
    Ok(())
}

/// Records the full network on `tape`.
pub fn network_forward<T: Element>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    cfg: &NetConfig,
    image: Var,
) -> Result<NetOutput> {
    check_input_shape(tape.shape(image))?;
    let mut f = Forward { tape, params, cfg };

    let x = f.conv("stage1.conv1", image, ConvOptions::same(1), Act::NormRelu)?;
    let x = f.conv("stage1.conv2", x, ConvOptions::same(1), Act::NormRelu)?;
    let x = f.msda("stage1.msda1", x)?;
    let mut x = f.msda("stage1.msda2", x)?;
    let mut encoder = vec![x];
    for stage in 2..=5 {
        let p = stage_path(stage);
        x = f.downsample(&format!("{p}.down"), x)?;
        if stage == 2 && cfg.ablation.hfdi {
            let injected = hfdi_on(f.tape, image)?;
            let cat = f.tape.channel_concat(&[x, injected])?;
            x = f.conv(&format!("{p}.inject"), cat, ConvOptions::valid(), Act::NormRelu)?;
        }
        x = f.msda(&format!("{p}.msda1"), x)?;
        x = f.msda(&format!("{p}.msda2"), x)?;
        encoder.push(x);
    }
    let encoder: [Var; 5] = encoder.try_into().expect("five stages");

    let mut deep = if cfg.ablation.fa {
        f.fa("fa", &encoder)?
    } else {
        encoder[4]
    };
    if cfg.ablation.mlrl_transfer {
        deep = f.mlrl("transfer", deep)?;
    }
    let bottleneck = deep;
    for stage in (1..=4).rev() {
        deep = f.faf(&format!("decoder.faf{stage}"), encoder[stage - 1], deep)?;
    }
    let logits = f.conv("head", deep, ConvOptions::valid(), Act::Linear)?;
    let probs = f.tape.sigmoid(logits)?;
    Ok(NetOutput {
        encoder,
        bottleneck,
        probs,
    })
}

impl NetworkParams {
    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Probability map for a batch of images, without recording gradients.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = network_forward(&mut tape, &bound, &self.config, x)?;
        Ok(tape.value(out.probs).clone())
    }
}
