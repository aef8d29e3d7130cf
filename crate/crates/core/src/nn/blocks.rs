//! Learned building blocks. Each block has a declaration on [`ParamBuilder`]
//! and a forward pass on [`Forward`] that read and write the same paths.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filters::{apply_fixed_filter_on, Direction};
use crate::nn::config::{norm_groups, NetConfig};
use crate::ops::{ConvOptions, Padding, PoolAxis, PoolMode};
use crate::params::{BoundParams, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Shape, Tensor};

/// Kernel size of the first conv in MLRL branches b1, b2, b3.
const MLRL_BRANCH_KERNELS: [usize; 3] = [1, 3, 5];

/// What follows a conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Linear,
    /// Group norm (when enabled in the config) then relu.
    NormRelu,
}

pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut ChaCha8Rng,
    pub cfg: &'a NetConfig,
}

impl ParamBuilder<'_> {
    pub fn conv(&mut self, path: &str, in_c: usize, out_c: usize, k: usize, act: Act) -> Result<()> {
        let w = ParamStore::kaiming_uniform(Shape::new(out_c, in_c, k, k), self.rng);
        self.store.insert(format!("{path}.weight"), w)?;
        self.store
            .insert(format!("{path}.bias"), Tensor::zeros([1, out_c, 1, 1]))?;
        if act == Act::NormRelu && self.cfg.norm {
            self.norm(&format!("{path}.norm"), out_c)?;
        }
        Ok(())
    }

    pub fn norm(&mut self, path: &str, c: usize) -> Result<()> {
        self.store
            .insert(format!("{path}.gamma"), Tensor::full([1, c, 1, 1], 1.0))?;
        self.store
            .insert(format!("{path}.beta"), Tensor::zeros([1, c, 1, 1]))
    }

    pub fn mlrl(&mut self, path: &str, c_in: usize, c_out: usize) -> Result<()> {
        self.conv(&format!("{path}.b0"), c_in, c_out, 1, Act::NormRelu)?;
        for (i, k) in MLRL_BRANCH_KERNELS.into_iter().enumerate() {
            let branch = format!("{path}.b{}", i + 1);
            self.conv(&format!("{branch}.conv"), c_in, c_out, k, Act::NormRelu)?;
            self.conv(&format!("{branch}.dconv"), c_out, c_out, 3, Act::NormRelu)?;
        }
        self.conv(&format!("{path}.fuse"), 4 * c_out, c_out, 1, Act::Linear)
    }

    pub fn mdfa(&mut self, path: &str) -> Result<()> {
        let k = self.cfg.mdfa_attn_kernel;
        for d in self.cfg.ablation.mdfa_directions() {
            self.conv(&format!("{path}.{d}.attn"), 2, 1, k, Act::Linear)?;
        }
        Ok(())
    }

    pub fn se(&mut self, path: &str, c: usize) -> Result<()> {
        let hidden = self.cfg.se_hidden(c);
        self.conv(&format!("{path}.fc1"), c, hidden, 1, Act::Linear)?;
        self.conv(&format!("{path}.fc2"), hidden, c, 1, Act::Linear)
    }

    pub fn msda(&mut self, path: &str, c: usize) -> Result<()> {
        let ab = &self.cfg.ablation;
        if !ab.msda {
            self.conv(&format!("{path}.conv1"), c, c, 3, Act::NormRelu)?;
            return self.conv(&format!("{path}.conv2"), c, c, 3, Act::Linear);
        }
        let (mlrl, mdfa, se) = (ab.msda_mlrl, ab.msda_mdfa, ab.msda_se);
        if mlrl {
            self.mlrl(&format!("{path}.mlrl"), c, c)?;
        }
        if mdfa {
            self.mdfa(&format!("{path}.mdfa"))?;
        }
        if se {
            self.se(&format!("{path}.se"), c)?;
        }
        Ok(())
    }

    pub fn downsample(&mut self, path: &str, c_in: usize, c_out: usize) -> Result<()> {
        self.conv(&format!("{path}.conv"), c_in, c_out, 3, Act::NormRelu)
    }

    pub fn faf(&mut self, path: &str, c_low: usize, c_high: usize) -> Result<()> {
        if !self.cfg.ablation.faf {
            return self.conv(&format!("{path}.proj"), c_high, c_low, 1, Act::Linear);
        }
        self.conv(&format!("{path}.prefuse"), c_high + c_low, c_high, 1, Act::Linear)?;
        self.conv(&format!("{path}.offset"), c_high, c_high, 3, Act::Linear)?;
        self.conv(&format!("{path}.align"), c_high, c_low, 1, Act::Linear)
    }

    pub fn fa(&mut self, path: &str, stage_channels: &[usize; 5]) -> Result<()> {
        let c5 = stage_channels[4];
        for (i, &c) in stage_channels.iter().enumerate() {
            self.conv(&format!("{path}.proj{}", i + 1), c, c5, 1, Act::Linear)?;
        }
        if self.cfg.norm {
            self.norm(&format!("{path}.norm"), c5)?;
        }
        Ok(())
    }
}

/// One forward evaluation against bound parameters.
pub struct Forward<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a BoundParams,
    pub cfg: &'a NetConfig,
}

impl<T: Element> Forward<'_, T> {
    pub fn conv(&mut self, path: &str, x: Var, opts: ConvOptions, act: Act) -> Result<Var> {
        let w = self.params.var(&format!("{path}.weight"))?;
        let b = self.params.var(&format!("{path}.bias"))?;
        let y = self.tape.conv2d(x, w, Some(b), opts)?;
        match act {
            Act::Linear => Ok(y),
            Act::NormRelu => {
                let y = if self.cfg.norm {
                    self.norm(&format!("{path}.norm"), y)?
                } else {
                    y
                };
                self.tape.relu(y)
            }
        }
    }

    fn norm(&mut self, path: &str, x: Var) -> Result<Var> {
        let gamma = self.params.var(&format!("{path}.gamma"))?;
        let beta = self.params.var(&format!("{path}.beta"))?;
        let groups = norm_groups(self.tape.shape(x).c);
        self.tape.group_norm(x, groups, gamma, beta)
    }

    /// Multi-scale local relation learning: four parallel branches, channel
    /// concat, 1×1 linear fusion.
    pub fn mlrl(&mut self, path: &str, x: Var) -> Result<Var> {
        let mut branches = vec![self.conv(&format!("{path}.b0"), x, ConvOptions::same(1), Act::NormRelu)?];
        for i in 0..3 {
            let branch = format!("{path}.b{}", i + 1);
            let h = self.conv(&format!("{branch}.conv"), x, ConvOptions::same(1), Act::NormRelu)?;
            let dilation = self.cfg.mlrl_dilations[i];
            branches.push(self.conv(&format!("{branch}.dconv"), h, ConvOptions::same(dilation), Act::NormRelu)?);
        }
        let cat = self.tape.channel_concat(&branches)?;
        self.conv(&format!("{path}.fuse"), cat, ConvOptions::valid(), Act::Linear)
    }

    /// Spatial attention for one direction, applied to `x`.
    pub fn mdfa_branch(&mut self, path: &str, x: Var, d: Direction) -> Result<Var> {
        let filtered = apply_fixed_filter_on(self.tape, x, d, 1, Padding::SameReplicate)?;
        let avg = self.tape.pool(filtered, PoolAxis::Channel, PoolMode::Avg)?;
        let max = self.tape.pool(filtered, PoolAxis::Channel, PoolMode::Max)?;
        let stats = self.tape.channel_concat(&[avg, max])?;
        let logits = self.conv(&format!("{path}.{d}.attn"), stats, ConvOptions::same(1), Act::Linear)?;
        let attention = self.tape.sigmoid(logits)?;
        self.tape.mul(x, attention)
    }

    /// Sum of the enabled directional branches; identity when none are.
    pub fn mdfa(&mut self, path: &str, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for d in self.cfg.ablation.mdfa_directions() {
            let y = self.mdfa_branch(path, x, d)?;
            acc = Some(match acc {
                None => y,
                Some(a) => self.tape.add(a, y)?,
            });
        }
        Ok(acc.unwrap_or(x))
    }

    pub fn se(&mut self, path: &str, x: Var) -> Result<Var> {
        let squeezed = self.tape.pool(x, PoolAxis::Spatial, PoolMode::Avg)?;
        let h = self.conv(&format!("{path}.fc1"), squeezed, ConvOptions::valid(), Act::Linear)?;
        let h = self.tape.relu(h)?;
        let e = self.conv(&format!("{path}.fc2"), h, ConvOptions::valid(), Act::Linear)?;
        let scale = self.tape.sigmoid(e)?;
        self.tape.mul(x, scale)
    }

    /// `SE(MDFA(MLRL(x))) + x`, or a plain two-conv residual block when the
    /// whole module is switched off.
    pub fn msda(&mut self, path: &str, x: Var) -> Result<Var> {
        let ab = &self.cfg.ablation;
        let body = if !ab.msda {
            let h = self.conv(&format!("{path}.conv1"), x, ConvOptions::same(1), Act::NormRelu)?;
            self.conv(&format!("{path}.conv2"), h, ConvOptions::same(1), Act::Linear)?
        } else {
            let (mlrl, mdfa, se) = (ab.msda_mlrl, ab.msda_mdfa, ab.msda_se);
            let mut h = x;
            if mlrl {
                h = self.mlrl(&format!("{path}.mlrl"), h)?;
            }
            if mdfa {
                h = self.mdfa(&format!("{path}.mdfa"), h)?;
            }
            if se {
                h = self.se(&format!("{path}.se"), h)?;
            }
            h
        };
        self.tape.add(body, x)
    }

    pub fn downsample(&mut self, path: &str, x: Var) -> Result<Var> {
        let s = self.tape.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::invalid("downsample", format!("odd spatial dims in {s}")));
        }
        self.conv(
            &format!("{path}.conv"),
            x,
            ConvOptions::strided(2, Padding::SameZero),
            Act::NormRelu,
        )
    }

    /// Feature alignment fusion of a half-resolution `f_high` into `f_low`.
    pub fn faf(&mut self, path: &str, f_low: Var, f_high: Var) -> Result<Var> {
        let (ls, hs) = (self.tape.shape(f_low), self.tape.shape(f_high));
        if ls.h != 2 * hs.h || ls.w != 2 * hs.w || ls.n != hs.n {
            return Err(Error::ShapeMismatch {
                op: "faf (needs 2:1 spatial ratio)",
                lhs: ls,
                rhs: hs,
            });
        }
        let up = self.tape.upsample_bilinear2x(f_high)?;
        let aligned = if self.cfg.ablation.faf {
            let cat = self.tape.channel_concat(&[up, f_low])?;
            let pre = self.conv(&format!("{path}.prefuse"), cat, ConvOptions::valid(), Act::Linear)?;
            let offset = self.conv(&format!("{path}.offset"), pre, ConvOptions::same(1), Act::Linear)?;
            let shifted = self.tape.add(up, offset)?;
            self.conv(&format!("{path}.align"), shifted, ConvOptions::valid(), Act::Linear)?
        } else {
            self.conv(&format!("{path}.proj"), up, ConvOptions::valid(), Act::Linear)?
        };
        self.tape.add(aligned, f_low)
    }

    /// Resizes every stage output to the deepest resolution, projects to the
    /// deepest width and sums; then norm + relu when norm is enabled.
    pub fn fa(&mut self, path: &str, stages: &[Var; 5]) -> Result<Var> {
        let deepest = self.tape.shape(stages[4]);
        let mut acc: Option<Var> = None;
        for (i, &stage) in stages.iter().enumerate() {
            let mut t = stage;
            for _ in i..4 {
                t = self.tape.avg_pool2x(t)?;
            }
            let s = self.tape.shape(t);
            if (s.h, s.w) != (deepest.h, deepest.w) {
                return Err(Error::ShapeMismatch {
                    op: "fa_aggregate (resolution ladder)",
                    lhs: deepest,
                    rhs: self.tape.shape(stage),
                });
            }
            let p = self.conv(&format!("{path}.proj{}", i + 1), t, ConvOptions::valid(), Act::Linear)?;
            acc = Some(match acc {
                None => p,
                Some(a) => self.tape.add(a, p)?,
            });
        }
        let sum = acc.expect("five stages");
        if self.cfg.norm {
            let n = self.norm(&format!("{path}.norm"), sum)?;
            self.tape.relu(n)
        } else {
            Ok(sum)
        }
    }
}
