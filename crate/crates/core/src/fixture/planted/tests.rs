use super::*;
use crate::data::load_manifest;
use crate::model::load_model;
use crate::segmentation::segment_to_patch;
use std::sync::OnceLock;

fn fixture() -> &'static PlantedFixture {
    static FX: OnceLock<(tempfile::TempDir, PlantedFixture)> = OnceLock::new();
    &FX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let fx = build_planted_fixture(dir.path(), 3).unwrap();
        (dir, fx)
    })
    .1
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn split_sizes_and_files() {
    let fx = fixture();
    assert_eq!(fx.manifest.class_names, CLASS_NAMES.map(String::from).to_vec());
    for k in 0..3 {
        assert_eq!(fx.manifest.split(Split::Probe).filter(|i| i.label == k).count(), PROBE_PER_CLASS);
        assert_eq!(fx.manifest.split(Split::Eval).filter(|i| i.label == k).count(), EVAL_PER_CLASS);
    }
    let reloaded = load_manifest(fx.manifest_path()).unwrap();
    assert_eq!(reloaded.instances.len(), 240);
    let model = load_model(fx.model_path()).unwrap();
    assert_eq!(model.layers().len(), 6);
    assert_eq!(&model, &fx.model);
    assert_eq!(load_oracle(fx.oracle_path()).unwrap(), fx.oracle);
}

#[test]
fn rendering_is_deterministic_and_plants_class_motif() {
    for k in 0..3 {
        let (a, motifs) = render_image(k, 11);
        let (b, _) = render_image(k, 11);
        assert_eq!(a, b);
        assert!(motifs.contains(&Motif::of_class(k)));
        assert!(motifs.iter().all(|m| [Motif::of_class(k), Motif::Snow, Motif::Grass].contains(m)));
    }
}

#[test]
fn striped_eval_images_predicted_confidently() {
    let fx = fixture();
    let mut correct = 0;
    for inst in fx.manifest.split(Split::Eval) {
        let p = fx.model.predict(&fx.manifest.load_image(inst).unwrap()).unwrap();
        correct += usize::from(p.predicted_class == inst.label);
        if inst.label == 0 {
            assert_eq!(p.predicted_class, 0, "{}", inst.instance_id);
            assert!(p.confidence > 0.8, "{} confidence {}", inst.instance_id, p.confidence);
        }
    }
    assert!(correct >= 85, "{correct}/90 eval images correct");
}

#[test]
fn stripe_and_dot_patches_embed_apart() {
    let fx = fixture();
    let means = fx.manifest.channel_means().unwrap();
    let mean_embedding = |instance: &str, motif: Motif| -> Vec<f64> {
        let inst = fx.manifest.instance(instance).unwrap();
        let image = fx.manifest.load_image(inst).unwrap();
        let mut sum = vec![0.0; CHANNELS.len()];
        let mut n = 0;
        for seg in default_segments(&image, instance).unwrap() {
            if fx.oracle.segment_motifs.get(&seg.segment_id) != Some(&motif) {
                continue;
            }
            let patch = segment_to_patch(&image, &seg, &means, fx.model.input_shape()).unwrap();
            let act = fx.model.activation(&patch.pixels, PROBE_LAYER).unwrap();
            sum.iter_mut().zip(act.data()).for_each(|(s, &v)| *s += v as f64);
            n += 1;
        }
        assert!(n > 0, "{instance} has no {motif:?} segment");
        sum
    };
    let stripe = mean_embedding("striped-probe-00", Motif::Stripe);
    let dot = mean_embedding("spotted-probe-00", Motif::Dot);
    let c = cosine(&stripe, &dot);
    assert!(c < 0.5, "cosine {c}");
}

#[test]
fn stripe_detectors_feed_striped_logit() {
    let head = head_weights();
    let (image, _) = render_image(0, 5);
    let act = fx_activation(&image);
    assert!(act[0] > 0.5 && act[1] > 0.5, "{act:?}");
    assert!(head[0][0] > 0.0 && head[0][1] > 0.0);
    assert!(head[1][0] < 0.0 && head[2][0] < 0.0);
}

fn fx_activation(image: &Tensor) -> Vec<f32> {
    fixture().model.activation(image, "dense1").unwrap().into_data()
}

#[test]
fn oracle_labels_majority_motif() {
    let fx = fixture();
    let counts = Motif::ALL.map(|m| fx.oracle.segment_motifs.values().filter(|&&v| v == m).count());
    assert!(counts.iter().all(|&c| c > 100), "{counts:?}");
    let (_, motifs) = render_image(1, 2);
    assert_eq!(motifs.len(), SIDE * SIDE);
    let all = Mask::new(SIDE, SIDE, vec![true; SIDE * SIDE]).unwrap();
    let mut oracle = Oracle::default();
    oracle.pixel_motifs.insert("x".into(), motifs.clone());
    let expected = Motif::ALL.into_iter().find(|m| 2 * motifs.iter().filter(|v| *v == m).count() > SIDE * SIDE);
    assert_eq!(oracle.motif_of("x", &all), expected);
    assert_eq!(oracle.motif_of("missing", &all), None);
    let mut top_left = vec![false; SIDE * SIDE];
    top_left[0] = true;
    let corner = Mask::new(SIDE, SIDE, top_left).unwrap();
    assert_eq!(oracle.motif_of("x", &corner), Some(motifs[0]));
}
