mod common;

use common::synthetic::sine_bump;
use tsexplain_core::attributions::integrated_gradients;
use tsexplain_core::counterfactuals::{nearest_unlike_neighbor, native_guide_cf, wachter_cf, Candidates, NativeGuideParams, WachterParams};
use tsexplain_core::nn::{train, Layer, Model, TrainConfig};

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn native_guide_contracts_on_trained_model() {
    let (xs, ys) = sine_bump(120, 200, 21);
    let model = Model::architecture_a(200, 2, 3).unwrap();
    let (model, _) = train(
        &model,
        &xs[..80],
        &ys[..80],
        &TrainConfig {
            epochs: 60,
            seed: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let train_idx: Vec<usize> = (0..80).collect();
    let preds = model.predict_all(&xs[..80]).unwrap();
    let candidates = Candidates {
        indices: &train_idx,
        series: &xs[..80],
        preds: &preds,
    };
    let mut degenerate = 0;
    for query in &xs[80..] {
        let pred = model.predict(query).unwrap();
        let (nun, _) = nearest_unlike_neighbor(candidates, query, pred).unwrap();
        let attr = integrated_gradients(&model, query, None, 32, None).unwrap();
        let cf = native_guide_cf(&model, query, &attr.values, &xs[nun], &NativeGuideParams::default()).unwrap();
        assert!(cf.l2 <= l2(query, &xs[nun]) + 1e-9);
        assert_eq!(model.predict(&cf.series).unwrap(), cf.predicted_class);
        assert!(cf.predicted_class != pred || cf.degenerate);
        degenerate += usize::from(cf.degenerate);
    }
    println!("{degenerate} of 40 native-guide counterfactuals degenerate");
}

#[test]
fn wachter_on_logistic_toy() {
    let model = Model::new(
        1,
        2,
        vec![Layer::Dense {
            inputs: 1,
            outputs: 2,
            weights: vec![0.0, 3.0],
            bias: vec![0.0, 0.0],
        }],
    )
    .unwrap();
    let cf = wachter_cf(&model, &[-1.0], 1, &WachterParams::default()).unwrap();
    let moved = (f64::from(cf.series[0]) + 1.0).abs();
    println!("moved {moved:.4} in {} iterations", cf.iterations);
    assert!((1.0..=1.2).contains(&moved));
    assert_eq!(model.predict(&cf.series).unwrap(), 1);
}
