//! Built-in mixtures for verification runs and as CLI config seeds.

use nalgebra::{DMatrix, DVector};

use crate::gmm::MixtureModel;
use crate::rng::{domain, standard_normal_vector, substream};

/// Master seed of the stock reference setup.
pub const REFERENCE_SEED: u64 = 42;

/// The stock testbed: 5 classes in 8 dimensions, unit-covariance components
/// with means drawn i.i.d. on the radius-2.5 sphere from the given master
/// seed, equal weights, one component per class.
pub fn reference_mixture_with_seed(master_seed: u64) -> MixtureModel {
    mixture_on_sphere(5, 8, 2.5, master_seed)
}

pub fn reference_mixture() -> MixtureModel {
    reference_mixture_with_seed(REFERENCE_SEED)
}

/// Equal-weight unit-covariance mixture with `classes` means placed
/// uniformly on the radius-`radius` sphere in `dim` dimensions.
pub fn mixture_on_sphere(classes: usize, dim: usize, radius: f64, master_seed: u64) -> MixtureModel {
    let means = (0..classes)
        .map(|k| {
            let mut rng = substream(master_seed, domain::MIXTURE, k as u64);
            let g = standard_normal_vector(&mut rng, dim);
            &g / g.norm() * radius
        })
        .collect();
    MixtureModel::isotropic(means, 1.0, (0..classes).collect(), classes)
        .expect("sphere mixture is valid by construction")
}

/// Two unit-covariance classes at mutual distance `separation_sigmas` along
/// the first axis.
pub fn two_class_mixture(separation_sigmas: f64, dim: usize) -> MixtureModel {
    let mut mean = DVector::zeros(dim);
    mean[0] = separation_sigmas / 2.0;
    MixtureModel::isotropic(vec![mean.clone(), -mean], 1.0, vec![0, 1], 2)
        .expect("two-class mixture is valid by construction")
}

/// Standard normal data in `dim` dimensions (single class).
pub fn standard_normal_mixture(dim: usize) -> MixtureModel {
    MixtureModel::new(
        vec![(1.0, DVector::zeros(dim), DMatrix::identity(dim, dim))],
        vec![0],
        1,
    )
    .expect("standard normal is valid by construction")
}
