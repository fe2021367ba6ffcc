//! Network-level equivariance comparisons shared by the CLI and tests.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

use crate::equivariance::{equivariance_error, image_tensor, Action, EquivReport, Interp, Region};
use crate::error::{invalid, Error, Result};
use crate::grid::RotationGroup;
use crate::network::{train_autoencoder, NetworkConfig, NetworkKind, ToyNetwork, TrainConfig, TrainReport};

/// One non-identity group element per image, drawn from `seed`.
pub fn random_group_actions(group: &RotationGroup, count: usize, seed: u64) -> Vec<Action> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let k = if group.order() > 1 { rng.random_range(1..group.order()) } else { 0 };
            Action::group_element(group, k)
        })
        .collect()
}

/// Group action for an angle; the orientation shift is the nearest group
/// element.
pub fn action_for_angle(group: &RotationGroup, angle: f64) -> Action {
    let t = group.order() as f64;
    let k = (angle / (2.0 * std::f64::consts::PI) * t).round().rem_euclid(t) as usize;
    Action { angle, shift: k }
}

/// Comparison region for a network on `side`-pixel inputs.
pub fn output_region(net: &ToyNetwork, side: usize) -> Region {
    let n_out = side - net.config().shrinkage();
    Region::default_disk(n_out, net.config().p)
}

/// Equivariance of the planar network output for each image/action pair.
pub fn network_equivariance(
    net: &ToyNetwork,
    images: &[Array2<f64>],
    actions: &[Action],
    interp: Interp,
) -> Result<Vec<EquivReport>> {
    if images.len() != actions.len() {
        return Err(invalid("one action per image is required"));
    }
    images
        .par_iter()
        .zip(actions)
        .map(|(img, action)| {
            let region = output_region(net, img.nrows());
            equivariance_error(|x| net.apply(x), net.kind().name(), image_tensor(img).view(), *action, region, interp)
        })
        .collect()
}

pub fn mean_rmse(reports: &[EquivReport]) -> f64 {
    reports.iter().map(|r| r.rmse).sum::<f64>() / reports.len() as f64
}

pub fn std_rmse(reports: &[EquivReport]) -> f64 {
    let m = mean_rmse(reports);
    (reports.iter().map(|r| (r.rmse - m).powi(2)).sum::<f64>() / reports.len() as f64).sqrt()
}

/// Which rotations an equivariance comparison applies.
#[derive(Debug, Clone, PartialEq)]
pub enum AngleSpec {
    /// One angle per image, uniform in `[-π, π)`.
    Random { seed: u64 },
    /// Every image under every listed angle.
    List(Vec<f64>),
}

impl AngleSpec {
    /// `(image index, angle)` pairs in image-major order.
    pub fn schedule(&self, images: usize) -> Vec<(usize, f64)> {
        match self {
            AngleSpec::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..images).map(|i| (i, rng.random_range(-PI..PI))).collect()
            }
            AngleSpec::List(angles) => (0..images).flat_map(|i| angles.iter().map(move |a| (i, *a))).collect(),
        }
    }
}

/// One image/angle measurement of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub init_seed: u64,
    pub image: usize,
    pub report: EquivReport,
}

/// Equivariance of `net` on every scheduled image/angle pair.
pub fn measure(net: &ToyNetwork, init_seed: u64, images: &[Array2<f64>], angles: &AngleSpec) -> Result<Vec<Measurement>> {
    let group = RotationGroup::new(net.config().t)?;
    let schedule = angles.schedule(images.len());
    let imgs: Vec<Array2<f64>> = schedule.iter().map(|(i, _)| images[*i].clone()).collect();
    let actions: Vec<Action> = schedule.iter().map(|(_, a)| action_for_angle(&group, *a)).collect();
    let reports = network_equivariance(net, &imgs, &actions, Interp::Bilinear)?;
    Ok(schedule.iter().zip(reports).map(|((i, _), report)| Measurement { init_seed, image: *i, report }).collect())
}

/// A network initialized from `seed` with biases centered on `center_on`.
pub fn initialized(kind: NetworkKind, cfg: NetworkConfig, seed: u64, center_on: &[Array2<f64>]) -> Result<ToyNetwork> {
    let mut net = match kind {
        NetworkKind::Equivariant => ToyNetwork::new_equivariant(cfg, seed)?,
        NetworkKind::Plain => ToyNetwork::new_plain(cfg, seed)?,
    };
    let tensors: Vec<_> = center_on.iter().map(image_tensor).collect();
    net.center_biases(&tensors)?;
    Ok(net)
}

/// Randomly initialized equivariant and plain stacks of the same shape,
/// measured on the same images and angles for every seed in `init_seeds`.
pub fn compare_stacks(
    cfg: NetworkConfig,
    init_seeds: &[u64],
    images: &[Array2<f64>],
    center_on: &[Array2<f64>],
    angles: &AngleSpec,
) -> Result<(Vec<Measurement>, Vec<Measurement>)> {
    if images.is_empty() || init_seeds.is_empty() {
        return Err(invalid("comparison needs images and at least one seed"));
    }
    let mut fconv = Vec::new();
    let mut plain = Vec::new();
    for &seed in init_seeds {
        fconv.extend(measure(&initialized(NetworkKind::Equivariant, cfg, seed, center_on)?, seed, images, angles)?);
        plain.extend(measure(&initialized(NetworkKind::Plain, cfg, seed, center_on)?, seed, images, angles)?);
    }
    Ok((fconv, plain))
}

pub fn reports(m: &[Measurement]) -> Vec<EquivReport> {
    m.iter().map(|m| m.report.clone()).collect()
}

/// Auto-encoder training with equivariance measured before and after.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ToyNetwork,
    pub report: TrainReport,
    pub before: Vec<Measurement>,
    pub after: Vec<Measurement>,
    /// Output standard deviation over the held-out images, relative to the
    /// target crops; near zero means the network collapsed.
    pub output_scale: f64,
}

pub fn train_and_measure(
    kind: NetworkKind,
    cfg: NetworkConfig,
    init_seed: u64,
    train: &[Array2<f64>],
    held_out: &[Array2<f64>],
    angles: &AngleSpec,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut net = initialized(kind, cfg, init_seed, train)?;
    let before = measure(&net, init_seed, held_out, angles)?;
    let tensors: Vec<_> = train.iter().map(image_tensor).collect();
    let report = train_autoencoder(&mut net, &tensors, train_cfg)?;
    let after = measure(&net, init_seed, held_out, angles)?;
    let mut out_sq = 0.0;
    let mut tgt_sq = 0.0;
    for img in held_out {
        let x = image_tensor(img);
        let y = net.apply(x.view())?;
        let target = net.crop_target(x.view());
        let (my, mt) = (y.mean().unwrap_or(0.0), target.mean().unwrap_or(0.0));
        out_sq += y.iter().map(|v| (v - my).powi(2)).sum::<f64>();
        tgt_sq += target.iter().map(|v| (v - mt).powi(2)).sum::<f64>();
    }
    if tgt_sq == 0.0 {
        return Err(Error::Contract("held-out images are constant".into()));
    }
    Ok(TrainOutcome { net, report, before, after, output_scale: (out_sq / tgt_sq).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    #[test]
    fn random_actions_skip_identity() {
        let g = RotationGroup::new(8).unwrap();
        let a = random_group_actions(&g, 200, 3);
        assert!(a.iter().all(|x| x.shift != 0 && x.shift < 8));
        assert_eq!(a, random_group_actions(&g, 200, 3));
        assert_eq!(action_for_angle(&g, std::f64::consts::PI).shift, 4);
        assert_eq!(action_for_angle(&g, -std::f64::consts::FRAC_PI_4).shift, 7);
    }

    #[test]
    fn schedules() {
        let r = AngleSpec::Random { seed: 4 }.schedule(50);
        assert_eq!(r.len(), 50);
        assert!(r.iter().all(|(_, a)| (-PI..PI).contains(a)));
        assert_eq!(r, AngleSpec::Random { seed: 4 }.schedule(50));
        let l = AngleSpec::List(vec![0.1, 0.2]).schedule(2);
        assert_eq!(l, vec![(0, 0.1), (0, 0.2), (1, 0.1), (1, 0.2)]);
    }

    #[test]
    fn quarter_turn_list_gives_exact_stacks() {
        let cfg = NetworkConfig { p: 3, h: 0.5, t: 4, channels: 2, hidden_layers: 1 };
        let img = Array2::from_shape_fn((15, 15), |(i, j)| ((i * 5 + j * 7) % 13) as f64 / 13.0);
        let (f, p) = compare_stacks(cfg, &[1, 2], &[img.clone()], &[img], &AngleSpec::List(vec![PI / 2.0, PI])).unwrap();
        assert_eq!(f.len(), 4);
        assert!(f.iter().all(|m| m.report.rmse <= 1e-10));
        assert!(p.iter().all(|m| m.report.rmse > 1e-3));
    }

    #[test]
    fn quarter_turns_are_exact_for_the_network() {
        let cfg = NetworkConfig { p: 3, h: 0.5, t: 4, channels: 2, hidden_layers: 2 };
        let net = ToyNetwork::new_equivariant(cfg, 1).unwrap();
        let img = Array2::from_shape_fn((17, 17), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let g = RotationGroup::new(4).unwrap();
        let actions: Vec<_> = (0..4).map(|k| Action::group_element(&g, k)).collect();
        let reps = network_equivariance(&net, &vec![img; 4], &actions, Interp::ExactQuarterTurn).unwrap();
        assert!(reps.iter().all(|r| r.rmse <= 1e-12), "{reps:?}");
    }
}
