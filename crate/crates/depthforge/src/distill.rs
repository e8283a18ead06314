//! EMA teacher maintenance and the knowledge-distillation consistency losses
//! folded into the generator (and discriminator) objectives.

use crate::nn::{Mode, Network};
use crate::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KdConfig {
    /// EMA decay τ.
    pub tau: f64,
    /// Weight of the generator consistency term.
    pub lambda_kd_g: f64,
    /// Weight of the discriminator consistency term.
    pub lambda_kd_d: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            tau: 0.994,
            lambda_kd_g: 1.0,
            lambda_kd_d: 0.5,
        }
    }
}

impl KdConfig {
    /// Plain-GAN ablation: both consistency terms off.
    pub fn disabled() -> KdConfig {
        KdConfig {
            tau: 0.994,
            lambda_kd_g: 0.0,
            lambda_kd_d: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("kd.tau", format!("must be in [0,1], got {}", self.tau)));
        }
        if self.lambda_kd_g < 0.0 {
            return Err(Error::config("kd.lambda_kd_g", "must be >= 0"));
        }
        if self.lambda_kd_d < 0.0 {
            return Err(Error::config("kd.lambda_kd_d", "must be >= 0"));
        }
        Ok(())
    }
}

/// Shadow copies of the generator and discriminator, updated only by EMA.
#[derive(Debug, Clone)]
pub struct EmaTeacher {
    pub generator: Network,
    pub discriminator: Network,
}

impl EmaTeacher {
    /// Teachers start as exact copies of the students.
    pub fn from_students(generator: &Network, discriminator: &Network) -> EmaTeacher {
        EmaTeacher {
            generator: generator.clone(),
            discriminator: discriminator.clone(),
        }
    }

    /// One EMA step toward the students: w_t ← τ·w_t + (1−τ)·w_s.
    pub fn update(&mut self, student_g: &Network, student_d: &Network, tau: f64) -> Result<()> {
        ema_update(&mut self.generator, student_g, tau)?;
        ema_update(&mut self.discriminator, student_d, tau)
    }
}

/// EMA over every weight and buffer of a single network.
pub fn ema_update(teacher: &mut Network, student: &Network, tau: f64) -> Result<()> {
    teacher.ema_from(student, tau as f32)
}

/// Mean squared elementwise difference between teacher and student outputs,
/// plus the gradient with respect to the student output.
pub fn consistency_loss(teacher_out: &Tensor, student_out: &Tensor) -> Result<(f64, Tensor)> {
    if teacher_out.shape() != student_out.shape() {
        return Err(Error::shape(
            "consistency_loss",
            format!("{:?}", teacher_out.shape()),
            format!("{:?}", student_out.shape()),
        ));
    }
    let n = student_out.len() as f64;
    let mut grad = Tensor::zeros(student_out.shape());
    let mut loss = 0.0f64;
    {
        let g = grad.data_mut();
        for (i, (&s, &t)) in student_out.data().iter().zip(teacher_out.data().iter()).enumerate() {
            let d = s as f64 - t as f64;
            loss += d * d;
            g[i] = (2.0 * d / n) as f32;
        }
    }
    Ok((loss / n, grad))
}

/// Generator consistency loss on a prepared (z ‖ one-hot) input batch:
/// batch-and-pixel mean of ‖G_t(z,y) − G_s(z,y)‖². Returns the loss and the
/// student parameter gradients; the teacher receives none.
pub fn kd_gen_loss(
    teacher_g: &Network,
    student_g: &mut Network,
    gen_input: &Tensor,
) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let teacher_out = teacher_g.eval(gen_input.clone())?;
    let (student_out, caches) = student_g.forward(gen_input.clone(), Mode::Train)?;
    let (loss, grad) = consistency_loss(&teacher_out, &student_out)?;
    let (_, param_grads) = student_g.backward(&caches, grad)?;
    Ok((loss, param_grads))
}

/// Discriminator consistency loss on a prepared (image ‖ label-channel)
/// batch: mean squared difference of the pre-sigmoid logits.
pub fn kd_disc_loss(
    teacher_d: &Network,
    student_d: &mut Network,
    disc_input: &Tensor,
) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let teacher_out = teacher_d.eval(disc_input.clone())?;
    let (student_out, caches) = student_d.forward(disc_input.clone(), Mode::Train)?;
    let (loss, grad) = consistency_loss(&teacher_out, &student_out)?;
    let (_, param_grads) = student_d.backward(&caches, grad)?;
    Ok((loss, param_grads))
}

/// Final generator objective: adversarial term plus weighted consistency.
pub fn total_gen_loss(adv: f64, kd: f64, lambda_kd_g: f64) -> f64 {
    adv + lambda_kd_g * kd
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_layer, LayerSpec};
    use rand::prelude::*;

    fn tiny_net(seed: u64) -> Network {
        let mut rng = StdRng::seed_from_u64(seed);
        Network::new(vec![
            init_layer(LayerSpec::Dense { in_dim: 4, out_dim: 6 }, "a", &mut rng).unwrap(),
            init_layer(LayerSpec::Tanh, "t", &mut rng).unwrap(),
        ])
    }

    #[test]
    fn ema_endpoint_cases() {
        let student = tiny_net(1);
        let mut teacher = tiny_net(2);
        let before = teacher.flat_params();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.flat_params(), before);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.flat_params(), student.flat_params());
    }

    #[test]
    fn ema_matches_geometric_recurrence() {
        for tau in [0.0f64, 0.5, 0.994, 1.0] {
            let student = tiny_net(3);
            let mut teacher = tiny_net(4);
            let t0 = teacher.flat_params();
            let s = student.flat_params();
            let n = 25;
            for _ in 0..n {
                ema_update(&mut teacher, &student, tau).unwrap();
            }
            let tau_n = tau.powi(n);
            for ((t, t_init), s_val) in teacher.flat_params().iter().zip(t0.iter()).zip(s.iter()) {
                let expected = tau_n * *t_init as f64 + (1.0 - tau_n) * *s_val as f64;
                assert!(
                    (*t as f64 - expected).abs() < 1e-6,
                    "tau={tau}: {t} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn consistency_loss_zero_for_identical() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap();
        let (loss, grad) = consistency_loss(&t, &t.clone()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn consistency_loss_mean_convention() {
        // teacher all 0, student all 1 → per-element squared diff 1 → mean 1
        let teacher = Tensor::zeros(&[1, 1, 8, 8]);
        let student = Tensor::filled(&[1, 1, 8, 8], 1.0);
        let (loss, grad) = consistency_loss(&teacher, &student).unwrap();
        assert!((loss - 1.0).abs() < 1e-9);
        let expected = 2.0 / 64.0;
        assert!(grad.data().iter().all(|&g| (g - expected as f32).abs() < 1e-9));
    }

    #[test]
    fn constant_logit_offset_gives_c_squared() {
        let teacher = Tensor::filled(&[5, 1], 0.3);
        let student = Tensor::filled(&[5, 1], 0.3 + 0.7);
        let (loss, _) = consistency_loss(&teacher, &student).unwrap();
        assert!((loss - 0.49).abs() < 1e-6, "loss = {loss}");
    }

    #[test]
    fn identical_nets_give_zero_kd_and_zero_grads() {
        let teacher = tiny_net(5);
        let mut student = tiny_net(5);
        let input = Tensor::from_vec(&[3, 4], (0..12).map(|i| i as f32 * 0.1).collect()).unwrap();
        let (loss, grads) = kd_gen_loss(&teacher, &mut student, &input).unwrap();
        assert!(loss.abs() < 1e-12);
        for layer in grads {
            for g in layer {
                assert!(g.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn teacher_gets_no_gradient_and_student_does() {
        let teacher = tiny_net(6);
        let teacher_before = teacher.flat_params();
        let mut student = tiny_net(7);
        let input = Tensor::from_vec(&[2, 4], (0..8).map(|i| (i as f32 * 0.3).sin()).collect()).unwrap();
        let (loss, grads) = kd_gen_loss(&teacher, &mut student, &input).unwrap();
        assert!(loss > 0.0);
        assert_eq!(teacher.flat_params(), teacher_before);
        let any_nonzero = grads
            .iter()
            .flatten()
            .any(|g| g.data().iter().any(|&v| v != 0.0));
        assert!(any_nonzero, "student must receive gradients");
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_gen_loss(0.7, 0.1, 0.0), 0.7);
        assert!((total_gen_loss(0.7, 0.1, 1.0) - 0.8).abs() < 1e-12);
        assert_eq!(total_gen_loss(0.42, 0.0, 1.0), 0.42);
    }

    proptest::proptest! {
        #[test]
        fn ema_stays_in_convex_hull(tau in 0.0f64..1.0, t0 in -2.0f32..2.0, s in -2.0f32..2.0) {
            let mut teacher = tiny_net(8);
            let student = {
                let mut n = tiny_net(8);
                for v in n.layers[0].state.weights[0].data_mut() { *v = s; }
                n
            };
            for v in teacher.layers[0].state.weights[0].data_mut() { *v = t0; }
            for _ in 0..10 {
                ema_update(&mut teacher, &student, tau).unwrap();
            }
            let lo = t0.min(s) - 1e-5;
            let hi = t0.max(s) + 1e-5;
            for &v in teacher.layers[0].state.weights[0].data() {
                proptest::prop_assert!(v >= lo && v <= hi, "{v} outside [{lo},{hi}]");
            }
        }
    }
}
