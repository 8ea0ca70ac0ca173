use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structured::PadKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// First `zprime_dim` latent entries drive an antisymmetric first map,
    /// the rest a symmetric one. Negating them mirrors the output.
    Zprime,
    /// Shared dense layer on `z` and `flip(z)`, second branch mirrored.
    /// Flipping the latent mirrors the output.
    Flip,
    /// Plain DC-GAN style generator, no symmetry guarantee.
    Baseline,
    /// Plain generator whose convolutions wrap around the map edges.
    Cyclic,
}

impl GeneratorKind {
    pub fn symmetric_kernels(self) -> bool {
        matches!(self, GeneratorKind::Zprime | GeneratorKind::Flip)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub z_dim: usize,
    /// Length of the antisymmetric latent part; the remaining
    /// `z_dim - zprime_dim` entries are symmetric.
    pub zprime_dim: usize,
    /// Channels of the first map followed by each stage's output; the last
    /// entry is the image channel count.
    pub channels: Vec<usize>,
    /// Side of the first feature map.
    pub base: usize,
    pub kernel: usize,
    pub pad: PadKind,
}

impl GeneratorSpec {
    /// 80x80 output from a 100-d latent, 512-channel 5x5 first map.
    pub fn reference(kind: GeneratorKind) -> Self {
        GeneratorSpec {
            kind,
            z_dim: 100,
            zprime_dim: 5,
            channels: vec![512, 256, 128, 64, 3],
            base: 5,
            kernel: 5,
            pad: if kind == GeneratorKind::Cyclic { PadKind::Circular } else { PadKind::Zero },
        }
    }

    /// 20x20 output from a 20-d latent (two latent channels per base cell
    /// for cyclic generators); small enough for CI.
    pub fn desk(kind: GeneratorKind) -> Self {
        GeneratorSpec {
            kind,
            z_dim: if kind == GeneratorKind::Cyclic { 50 } else { 20 },
            zprime_dim: 3,
            channels: vec![64, 32, 3],
            base: 5,
            kernel: 5,
            pad: if kind == GeneratorKind::Cyclic { PadKind::Circular } else { PadKind::Zero },
        }
    }

    /// 64x64 tile generator (4x4 first map, four stages).
    pub fn texture(kind: GeneratorKind, pad: PadKind) -> Self {
        GeneratorSpec {
            kind,
            z_dim: 32,
            zprime_dim: 0,
            channels: vec![32, 16, 8, 8, 3],
            base: 4,
            kernel: 5,
            pad,
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn output_size(&self) -> usize {
        self.base << self.stages()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn zdoubleprime_dim(&self) -> usize {
        self.z_dim - self.zprime_dim
    }

    /// Latent channels per base cell of a cyclic generator, whose latent
    /// is a `[channels, base, base]` grid.
    pub fn latent_channels(&self) -> usize {
        self.z_dim / (self.base * self.base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return bad(format!("channel ladder {:?} needs at least two non-zero entries", self.channels));
        }
        if self.z_dim == 0 || self.base == 0 {
            return bad("z_dim and base must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        match self.kind {
            GeneratorKind::Zprime => {
                if self.zprime_dim == 0 || self.zprime_dim >= self.z_dim {
                    return bad(format!(
                        "zprime_dim {} must lie in 1..{} so that z' and z'' are both non-empty",
                        self.zprime_dim, self.z_dim
                    ));
                }
                if self.base % 2 == 0 {
                    return bad("the z' first map needs an odd width".into());
                }
            }
            GeneratorKind::Flip | GeneratorKind::Baseline => {
                if self.zprime_dim > self.z_dim {
                    return bad("zprime_dim exceeds z_dim".into());
                }
            }
            GeneratorKind::Cyclic => {
                if self.pad == PadKind::Zero {
                    return bad("cyclic generators need a wrapping pad mode".into());
                }
                if self.z_dim % (self.base * self.base) != 0 {
                    return bad(format!(
                        "cyclic latents are laid out on the {0}x{0} base grid, so z_dim {1} must be a multiple of {2}",
                        self.base,
                        self.z_dim,
                        self.base * self.base
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    /// Symmetric kernels, average pooling and a folded head: mirror
    /// invariant.
    Symmetric,
    Standard,
    /// GRAM descriptors of every layer feed the dense head.
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub kind: DiscriminatorKind,
    /// Input channels followed by each stage's output channels.
    pub channels: Vec<usize>,
    /// Side of the (square) input image.
    pub input: usize,
    pub kernel: usize,
}

impl DiscriminatorSpec {
    /// 80x80 input folded down to a 5x5x512 map.
    pub fn reference(kind: DiscriminatorKind) -> Self {
        DiscriminatorSpec { kind, channels: vec![3, 64, 128, 256, 512], input: 80, kernel: 5 }
    }

    pub fn desk(kind: DiscriminatorKind) -> Self {
        DiscriminatorSpec { kind, channels: vec![3, 32, 64], input: 20, kernel: 5 }
    }

    pub fn texture() -> Self {
        DiscriminatorSpec { kind: DiscriminatorKind::Texture, channels: vec![3, 8, 16, 32], input: 64, kernel: 3 }
    }

    pub fn stages(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn final_size(&self) -> usize {
        self.input >> self.stages()
    }

    /// Length of the vector fed to the dense head.
    pub fn head_features(&self) -> usize {
        let c = *self.channels.last().unwrap_or(&0);
        let f = self.final_size();
        match self.kind {
            DiscriminatorKind::Symmetric => c * f * f.div_ceil(2),
            DiscriminatorKind::Standard => c * f * f,
            DiscriminatorKind::Texture => self.channels.iter().map(|&k| (k + 1) * (k + 1)).sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("discriminator: {m}")));
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return bad(format!("channel ladder {:?} needs at least two non-zero entries", self.channels));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.input == 0 || self.input % (1 << self.stages()) != 0 {
            return bad(format!("input {} is not divisible by 2^{}", self.input, self.stages()));
        }
        if self.kind == DiscriminatorKind::Symmetric && self.final_size() % 2 == 0 {
            return bad(format!("symmetric folding needs an odd final map, got {}", self.final_size()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_sizes() {
        let g = GeneratorSpec::reference(GeneratorKind::Zprime);
        assert_eq!(g.output_size(), 80);
        assert_eq!(g.zdoubleprime_dim(), 95);
        g.validate().unwrap();
        let d = DiscriminatorSpec::reference(DiscriminatorKind::Symmetric);
        assert_eq!(d.final_size(), 5);
        assert_eq!(d.head_features(), 7680);
        d.validate().unwrap();
    }

    #[test]
    fn desk_sizes() {
        assert_eq!(GeneratorSpec::desk(GeneratorKind::Flip).output_size(), 20);
        assert_eq!(DiscriminatorSpec::desk(DiscriminatorKind::Symmetric).final_size(), 5);
        assert_eq!(GeneratorSpec::texture(GeneratorKind::Cyclic, PadKind::Circular).output_size(), 64);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut g = GeneratorSpec::desk(GeneratorKind::Zprime);
        g.zprime_dim = 20;
        assert!(g.validate().is_err());
        let mut g = GeneratorSpec::desk(GeneratorKind::Cyclic);
        g.pad = PadKind::Zero;
        assert!(g.validate().is_err());
        let mut g = GeneratorSpec::texture(GeneratorKind::Cyclic, PadKind::Circular);
        g.z_dim = 30;
        assert!(g.validate().is_err());
        let mut d = DiscriminatorSpec::desk(DiscriminatorKind::Symmetric);
        d.input = 40; // final map 10, even
        assert!(d.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = r#"{"kind":"zprime","z_dim":20,"zprime_dim":3,"channels":[8,3],"base":5,"kernel":5,"pad":"zero","extra":1}"#;
        assert!(serde_json::from_str::<GeneratorSpec>(s).is_err());
    }
}
