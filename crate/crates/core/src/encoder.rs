//! Convolutional trunk shared by pretraining and the world model.

use ape_tensor::nn::Conv2d;
use ape_tensor::{Bound, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section};
use crate::error::{invalid, Error, Result};
use crate::vision::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            strides: vec![2, 2, 2, 1],
            kernel: 3,
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.len() != self.strides.len() {
            return Err(invalid(format!(
                "encoder needs >= 2 stages with one stride each (channels {:?}, strides {:?})",
                self.channels, self.strides
            )));
        }
        if self.kernel % 2 == 0 || self.strides.contains(&0) || self.channels.contains(&0) {
            return Err(invalid("encoder kernel must be odd and strides/channels positive"));
        }
        if self.output_size() == 0 {
            return Err(invalid(format!("input {} vanishes under strides {:?}", self.input_size, self.strides)));
        }
        Ok(())
    }

    pub fn stage_count(&self) -> usize {
        self.channels.len()
    }

    /// Spatial side of the final feature map ("same" padding, so each stage
    /// maps `s` to `ceil(s / stride)`).
    pub fn output_size(&self) -> usize {
        let pad = self.kernel / 2;
        self.strides.iter().fold(self.input_size, |s, &st| {
            (s + 2 * pad).checked_sub(self.kernel).map_or(0, |v| v / st + 1)
        })
    }

    /// Channels x height x width of the final map.
    pub fn flat_dim(&self) -> usize {
        self.channels.last().unwrap() * self.output_size().pow(2)
    }

    pub fn pooled_dim(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Global average pool over space; used for pretraining and probing.
    Pooled,
    /// Flattened final map; keeps spatial layout for control.
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Conv2d>,
}

/// Parameter partition produced by [`Encoder::freeze_split`].
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeSplit {
    pub frozen: Vec<ParamId>,
    pub trainable: Vec<ParamId>,
}

impl FreezeSplit {
    pub fn is_frozen(&self, index: usize) -> bool {
        self.frozen.iter().any(|p| p.0 == index)
    }
}

pub const PREFIX: &str = "enc";

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut in_c = Image::CHANNELS;
        let stages = config
            .channels
            .iter()
            .zip(&config.strides)
            .enumerate()
            .map(|(i, (&c, &s))| {
                let conv = Conv2d::new(store, &format!("{PREFIX}.stage{i}"), in_c, c, config.kernel, s, config.kernel / 2, rng);
                in_c = c;
                conv
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn stage_params(&self, stage: usize) -> [ParamId; 2] {
        [self.stages[stage].weight, self.stages[stage].bias]
    }

    pub fn params(&self) -> Vec<ParamId> {
        (0..self.stages.len()).flat_map(|s| self.stage_params(s)).collect()
    }

    /// Splits trunk parameters into the first `freeze_stages` stages and the rest.
    pub fn freeze_split(&self, freeze_stages: usize) -> Result<FreezeSplit> {
        if freeze_stages >= self.stages.len() {
            return Err(invalid(format!(
                "cannot freeze {freeze_stages} of {} stages; at least one must stay trainable",
                self.stages.len()
            )));
        }
        let (frozen, trainable) = (0..self.stages.len()).partition::<Vec<_>, _>(|&s| s < freeze_stages);
        Ok(FreezeSplit {
            frozen: frozen.into_iter().flat_map(|s| self.stage_params(s)).collect(),
            trainable: trainable.into_iter().flat_map(|s| self.stage_params(s)).collect(),
        })
    }

    fn check_input<T: Real>(&self, x: &Var<'_, T>) -> Result<()> {
        let s = x.shape();
        let n = self.config.input_size;
        if s.len() != 4 || s[1] != Image::CHANNELS || s[2] != n || s[3] != n {
            return Err(invalid(format!("encoder expects [batch, 3, {n}, {n}] input, got {s:?}")));
        }
        Ok(())
    }

    /// Runs stages `range` on `x` (ReLU after every stage).
    pub fn stages_forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        mut x: Var<'t, T>,
        range: std::ops::Range<usize>,
    ) -> Result<Var<'t, T>> {
        if range.start == 0 {
            self.check_input(&x)?;
            // pixels in [0, 1] -> roughly zero-mean, unit-scale
            x = x.add_scalar(-0.5).scale(4.0);
        }
        for s in range {
            x = self.stages[s].forward(p, x)?.relu();
        }
        Ok(x)
    }

    /// Converts a final feature map to the requested readout.
    pub fn readout<'t, T: Real>(&self, map: Var<'t, T>, readout: Readout) -> Result<Var<'t, T>> {
        let s = map.shape();
        Ok(match readout {
            Readout::Flat => map.reshape(&[s[0], s[1] * s[2] * s[3]])?,
            Readout::Pooled => map.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)?,
        })
    }

    pub fn encode<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, readout: Readout) -> Result<Var<'t, T>> {
        let map = self.stages_forward(p, x, 0..self.stages.len())?;
        self.readout(map, readout)
    }

    pub fn feature_dim(&self, readout: Readout) -> usize {
        match readout {
            Readout::Flat => self.config.flat_dim(),
            Readout::Pooled => self.config.pooled_dim(),
        }
    }

    /// Trunk parameters of `store` as a checkpoint section.
    pub fn to_section<T: Real>(&self, store: &ParamStore<T>) -> Section {
        let mut s = Section::new("encoder");
        for id in self.params() {
            s.push_tensor(store.name(id.0), store.get(id).cast());
        }
        s.push_bytes("input_size", (self.config.input_size as u64).to_le_bytes().to_vec());
        s
    }

    /// Installs the trunk stored in `ck` into `store`; heads in the
    /// checkpoint are ignored.
    pub fn load_pretrained<T: Real>(&self, ck: &Checkpoint, store: &mut ParamStore<T>) -> Result<()> {
        let section = ck.section("encoder")?;
        let size = section.bytes("input_size")?;
        let size = u64::from_le_bytes(size.try_into().map_err(|_| Error::Checkpoint("bad input_size".into()))?);
        if size as usize != self.config.input_size {
            return Err(Error::Checkpoint(format!(
                "encoder trained at {size}x{size}, model expects {n}x{n}",
                n = self.config.input_size
            )));
        }
        let mut problems = Vec::new();
        let mut values = Vec::new();
        for id in self.params() {
            let name = store.name(id.0).to_string();
            match section.tensor(&name) {
                Ok(t) if t.shape() == store.get(id).shape() => values.push((id, t.cast::<T>())),
                Ok(t) => problems.push(format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), store.get(id).shape())),
                Err(_) => problems.push(format!("{name}: missing")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("encoder incompatible: {}", problems.join("; "))));
        }
        for (id, t) in values {
            store.set(id.0, t)?;
        }
        Ok(())
    }
}

/// Stacks images into an NCHW tensor.
pub fn images_to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(invalid("images in a batch must share a size"));
        }
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}
