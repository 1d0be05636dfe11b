use reconkd::denoiser::{Denoiser, DenoiserArch};
use reconkd::diffusion::{make_linear_schedule, make_step_plan, CallCounter, ConstantPredictor, NoisePredictor};
use reconkd::forensics::{compute_dire, extract_eps0, extract_sample, make_student_input, LABEL_FAKE};
use reconkd::numerics::{Array, Rng};

fn live_denoiser() -> Denoiser {
    let mut rng = Rng::new(4, 0);
    let mut d = Denoiser::<f32>::init(DenoiserArch::default(), &mut rng).unwrap();
    for p in d.params_mut() {
        for v in p.data_mut() {
            *v += 0.05 * rng.normal() as f32;
        }
    }
    d
}

#[test]
fn features_on_a_real_denoiser() {
    let sched = make_linear_schedule(100, 1e-3, 0.05).unwrap();
    let plan = make_step_plan(100, 20).unwrap();
    let d = live_denoiser();
    let x: Array = Rng::new(5, 0).normal_array(&[1, 8, 8]);

    let counter = CallCounter::new(&d);
    let dire = compute_dire(&x, &counter, &sched, &plan).unwrap();
    assert_eq!(counter.reset(), 40);
    assert!(dire.data().iter().all(|&v| v >= 0.0));
    assert!(dire.max_abs() > 0.0);

    let eps0 = extract_eps0(&x, &counter, &sched, &plan).unwrap();
    assert_eq!(counter.calls(), 1);
    assert!(eps0.sub(&d.predict_eps(&x, 0).unwrap()).unwrap().max_abs() < 1e-5);

    let s = extract_sample(&x, LABEL_FAKE, "g", &d, &sched, &plan).unwrap();
    assert_eq!((s.dire, s.eps0, s.label), (dire, eps0.clone(), LABEL_FAKE));
    let si = make_student_input(&x, &eps0).unwrap();
    assert_eq!(si.channels.shape(), &[2, 8, 8]);
}

#[test]
fn constant_systems_reconstruct_exactly() {
    let sched = make_linear_schedule(100, 1e-3, 0.05).unwrap();
    let mut rng = Rng::new(6, 0);
    for steps in [1, 5, 20, 100] {
        let plan = make_step_plan(100, steps).unwrap();
        let x: Array = rng.normal_array(&[1, 6, 6]);
        let d = compute_dire(&x, &ConstantPredictor(0.3), &sched, &plan).unwrap();
        assert!(d.max_abs() <= 1e-5, "S={steps}: {}", d.max_abs());
    }
}
