use std::fs;

use reconkd::datagen::{
    augment, augment_with_flip, center_crop, gen_fake, gen_real, gen_unseen_fake, generator_tag, import_plain_dir,
    is_unseen_tag, load_dataset, real_image, resize_bilinear, save_dataset, AugmentConfig, ChannelStats, Dataset,
    FakeSource, Normalizer, Split, TextureConfig,
};
use reconkd::diffusion::{make_linear_schedule, make_step_plan, ConstantPredictor};
use reconkd::forensics::{DireSample, LABEL_FAKE, LABEL_REAL};
use reconkd::numerics::{Array, Rng};

#[test]
fn real_textures_are_bounded_and_reproducible() {
    let tex = TextureConfig::default();
    let a = real_image(3, 7, 16, &tex);
    assert_eq!(a.shape(), &[1, 16, 16]);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(a.to_bits(), real_image(3, 7, 16, &tex).to_bits());
    assert_ne!(a.to_bits(), real_image(3, 8, 16, &tex).to_bits());
    let smooth = TextureConfig {
        grain_std: 0.0,
        ..tex
    };
    let s = real_image(3, 7, 16, &smooth);
    let (lo, hi) = s.data().iter().fold((1.0f32, -1.0f32), |(l, h), &v| (l.min(v), h.max(v)));
    assert!((lo + 1.0).abs() < 1e-6 && (hi - 1.0).abs() < 1e-6);
}

#[test]
fn gen_real_validates_arguments() {
    let tex = TextureConfig::default();
    assert!(gen_real(0, 16, &tex, 0, 0, Split::Train).is_err());
    assert!(gen_real(4, 12, &tex, 0, 0, Split::Train).is_err());
    let bad = TextureConfig {
        sigma_min: 3.0,
        sigma_max: 1.0,
        ..tex
    };
    assert!(gen_real(4, 16, &bad, 0, 0, Split::Train).is_err());
    let ds = gen_real(4, 8, &tex, 0, 10, Split::Val).unwrap();
    assert_eq!(ds.len(), 4);
    assert!(ds.labels().iter().all(|&l| l == LABEL_REAL));
    assert_eq!(ds.images()[0], real_image(0, 10, 8, &tex));
}

#[test]
fn dataset_file_round_trip_is_bit_exact() {
    let mut ds = gen_real(5, 8, &TextureConfig::default(), 1, 0, Split::Test).unwrap();
    ds.push(Array::full(&[1, 8, 8], 0.25), LABEL_FAKE, "unseen:x").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ddfd");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
    assert_eq!(back.composition()["real-grf"], 5);

    let bytes = fs::read(&path).unwrap();
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(Dataset::from_bytes(&bad).is_err());
}

#[test]
fn datasets_reject_mixed_shapes_and_bad_labels() {
    let mut ds = Dataset::empty(Split::Train);
    ds.push(Array::zeros(&[1, 8, 8]), 0, "r").unwrap();
    assert!(ds.push(Array::zeros(&[1, 4, 4]), 0, "r").is_err());
    assert!(ds.push(Array::zeros(&[1, 8, 8]), 2, "r").is_err());
}

#[test]
fn unseen_generators_never_enter_training() {
    let mut ds = Dataset::empty(Split::Train);
    ds.push(Array::zeros(&[1, 8, 8]), LABEL_FAKE, "ddim-s20-abc").unwrap();
    assert!(ds.check_split_hygiene().is_ok());
    ds.push(Array::zeros(&[1, 8, 8]), LABEL_FAKE, "unseen:ddim-s10-abc").unwrap();
    assert!(ds.check_split_hygiene().is_err());
    let test = ds.clone().with_split(Split::Test);
    assert!(test.check_split_hygiene().is_ok());
    assert_eq!(ds.filter(|t, _| !is_unseen_tag(t)).len(), 1);
}

#[test]
fn fakes_are_tagged_clipped_and_deterministic() {
    let sched = make_linear_schedule(100, 1e-3, 0.05).unwrap();
    let pred = ConstantPredictor(0.1);
    let src = |steps| FakeSource {
        model: &pred,
        sched: &sched,
        plan: make_step_plan(100, steps).unwrap(),
        tag: generator_tag("0123456789abcdef", steps),
    };
    let a = gen_fake(&src(20), 3, 1, 8, 5, Split::Test).unwrap();
    assert_eq!(a, gen_fake(&src(20), 3, 1, 8, 5, Split::Test).unwrap());
    assert_eq!(a.gen_tags()[0], "ddim-s20-01234567");
    assert!(a.images().iter().all(|x| x.max_abs() <= 1.0));
    assert!(a.labels().iter().all(|&l| l == LABEL_FAKE));

    let u = gen_unseen_fake(&[src(10), src(5)], 2, 1, 8, 5).unwrap();
    assert_eq!(u.len(), 4);
    assert!(u.gen_tags().iter().all(|t| is_unseen_tag(t)));
    assert_eq!(u.split(), Split::Test);
    assert!(gen_unseen_fake(&[src(10)], 2, 1, 8, 5).is_err());
}

#[test]
fn resize_and_crop() {
    let img = Array::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let up = resize_bilinear(&img, 3, 3).unwrap();
    assert_eq!(up.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    assert_eq!(resize_bilinear(&img, 2, 2).unwrap(), img);
    let c = center_crop(&up, 1).unwrap();
    assert_eq!(c.data(), &[1.5]);
    assert!(center_crop(&img, 3).is_err());
}

#[test]
fn plain_text_images_import() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("b.txt"), "0 1\n-1, 0.5\n").unwrap();
    fs::write(dir.path().join("a.txt"), "0 0\n0 0\n").unwrap();
    fs::write(dir.path().join("skip.md"), "not an image").unwrap();
    let ds = import_plain_dir(dir.path(), 8, LABEL_REAL, "imported", Split::Test).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.images()[0].max_abs(), 0.0);
    assert_eq!(ds.images()[1].shape(), &[1, 8, 8]);
    fs::write(dir.path().join("c.txt"), "0 1\n2\n").unwrap();
    assert!(import_plain_dir(dir.path(), 8, LABEL_REAL, "imported", Split::Test).is_err());
    let empty = tempfile::tempdir().unwrap();
    assert!(import_plain_dir(empty.path(), 8, LABEL_REAL, "x", Split::Test).is_err());
}

fn sample(seed: u64, label: u8) -> DireSample {
    let mut rng = Rng::new(seed, 0);
    let x0: Array = rng.normal_array(&[1, 4, 4]);
    let dire = rng.normal_array::<f32>(&[1, 4, 4]).map(f32::abs);
    DireSample::new(x0, dire, rng.normal_array(&[1, 4, 4]), label, "t").unwrap()
}

#[test]
fn one_flip_is_shared_by_all_views() {
    let s = sample(1, 0);
    let norm = Normalizer::fit(&[s.clone(), sample(2, 1)]).unwrap();
    let cfg = AugmentConfig {
        hflip_prob: 1.0,
        normalize_image: false,
        normalize_noise: false,
    };
    let p = augment(&s, &cfg, &norm, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(p.x0, s.x0.hflip());
    assert_eq!(p.dire, s.dire.hflip());
    assert_eq!(p.eps0, s.eps0.hflip());
    let none = augment_with_flip(&s, false, &cfg.eval(), &norm).unwrap();
    assert_eq!(none.x0, s.x0);
    assert_eq!(cfg.eval().hflip_prob, 0.0);
    let bad = AugmentConfig {
        hflip_prob: 1.5,
        ..cfg
    };
    assert!(augment_with_flip(&s, false, &bad, &norm).is_err());
}

#[test]
fn noise_is_left_unnormalized_by_default() {
    let samples: Vec<DireSample> = (0..6).map(|i| sample(i, (i % 2) as u8)).collect();
    let norm = Normalizer::fit(&samples).unwrap();
    let cfg = AugmentConfig::default();
    assert!(!cfg.normalize_noise);
    let p = augment_with_flip(&samples[0], false, &cfg, &norm).unwrap();
    assert_eq!(p.eps0, samples[0].eps0);
    if cfg.normalize_image {
        assert_eq!(p.x0, norm.image.apply(&samples[0].x0).unwrap());
    }

    let stats = ChannelStats::fit(samples.iter().map(|s| &s.x0)).unwrap();
    let z: Vec<Array> = samples.iter().map(|s| stats.apply(&s.x0).unwrap()).collect();
    let refit = ChannelStats::fit(z.iter()).unwrap();
    assert!(refit.mean[0].abs() < 1e-5 && (refit.std[0] - 1.0).abs() < 1e-4);
    assert!(ChannelStats::fit(std::iter::empty()).is_err());
    assert_eq!(ChannelStats::identity(2).apply(&Array::full(&[2, 1, 1], 3.0)).unwrap().data(), &[3.0, 3.0]);
}
