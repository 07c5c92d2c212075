use gsa_core::cost::analyze;
use gsa_core::model::{build_model, model_forward, Architecture, ModelSpec};
use gsa_core::tensor::BnMode;
use gsa_core::verify::randn;
use gsa_core::Tensor;

fn small(preset: &str) -> ModelSpec {
    let mut spec = ModelSpec::preset(preset).unwrap();
    spec.input_size = [32, 32];
    spec.num_classes = 10;
    spec.zero_init_head = false;
    spec
}

fn params(preset: &str) -> u64 {
    analyze(&Architecture::from_spec(&ModelSpec::preset(preset).unwrap()).unwrap()).total_params
}

#[test]
fn parameters_fall_as_gsa_replaces_more_groups() {
    let masks = ["table5:0000", "table5:0001", "table5:0011", "table5:0111", "table5:1111"];
    let counts: Vec<u64> = masks.iter().map(|m| params(m)).collect();
    assert!(counts.windows(2).all(|w| w[0] > w[1]), "{counts:?}");
    assert_eq!(counts[0], params("resnet50"));
    assert_eq!(counts[4], params("gsa-resnet50"));
}

#[test]
fn inference_is_independent_of_batch_composition() {
    let model = build_model(&small("table5:0011"), 3).unwrap();
    let x = randn(&[2, 32, 32, 3], 11);
    let both = model_forward(&model, &x, BnMode::Infer).unwrap();
    let half = 32 * 32 * 3;
    for i in 0..2 {
        let one = Tensor::new(vec![1, 32, 32, 3], x.data()[i * half..(i + 1) * half].to_vec()).unwrap();
        let logits = model_forward(&model, &one, BnMode::Infer).unwrap();
        let row = Tensor::new(vec![1, 10], both.data()[i * 10..(i + 1) * 10].to_vec()).unwrap();
        assert!(logits.max_abs_diff(&row).unwrap() <= 1e-12);
    }
}

#[test]
fn logits_do_not_depend_on_thread_count() {
    let model = build_model(&small("gsa-resnet38"), 5).unwrap();
    let x = randn(&[2, 32, 32, 3], 13);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| model_forward(&model, &x, BnMode::Infer).unwrap())
    };
    let one = run(1);
    assert!(one.is_finite());
    assert_eq!(one, run(4));
}
