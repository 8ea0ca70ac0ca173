//! Generator and discriminator assemblies built from the structured ops.

pub mod discriminator;
pub mod generator;
pub mod params;
pub mod spec;

pub use discriminator::{gram_descriptor, Discriminator};
pub use generator::{negate_zprime, partner_latent, sample_latent, Generator};
pub use params::{Binding, ParamSet, Phase};
pub use spec::{DiscriminatorKind, DiscriminatorSpec, GeneratorKind, GeneratorSpec};
