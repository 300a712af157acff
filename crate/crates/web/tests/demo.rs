use std::sync::OnceLock;

use adapterswap::lora::Weighting;
use adapterswap::retriever::ProjectionKind;
use adapterswap::Error;
use adapterswap_web::DemoCore;

fn demo() -> &'static DemoCore {
    static DEMO: OnceLock<DemoCore> = OnceLock::new();
    DEMO.get_or_init(|| DemoCore::build(3, 4).unwrap())
}

#[test]
fn scatter_covers_every_document() {
    let d = demo();
    assert_eq!(d.groups().len(), 4);
    for kind in [ProjectionKind::Lda, ProjectionKind::Pca] {
        let points = d.scatter(kind).unwrap();
        assert_eq!(points.len(), 48);
        assert!(points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
    }
}

#[test]
fn ranking_only_returns_held_labels() {
    let d = demo();
    let groups = d.groups();
    let held = vec![groups[1].clone(), groups[3].clone()];
    let r = d.rank("some query text", &held, 3, Weighting::DensitySoftmax).unwrap();
    assert_eq!(r.entries.len(), 2);
    assert!(r.entries.iter().all(|e| held.contains(&e.group_id)));
    assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(matches!(d.rank("x", &[], 1, Weighting::Uniform), Err(Error::NoAccessibleAdapters)));
}

#[test]
fn composition_weights_normalize_and_adapters_help_their_group() {
    let d = demo();
    let groups = d.groups();
    let base = d.compose(&[], "ab").unwrap();
    assert!(base.weights.is_empty());
    let probs: f64 = base.next.iter().map(|(_, p)| p).sum();
    assert!(probs > 0.0 && probs <= 1.0 + 1e-9);

    let own = d.compose(&[(groups[0].clone(), 3.0), (groups[1].clone(), 0.0)], "ab").unwrap();
    assert_eq!(own.weights, vec![(groups[0].clone(), 1.0)]);
    assert!(own.perplexity[&groups[0]] < base.perplexity[&groups[0]]);

    let half = d.compose(&[(groups[0].clone(), 1.0), (groups[1].clone(), 1.0)], "ab").unwrap();
    assert_eq!(half.weights.iter().map(|(_, w)| *w).collect::<Vec<_>>(), vec![0.5, 0.5]);
    assert!(matches!(d.compose(&[("nope".into(), 1.0)], ""), Err(Error::UnknownGroup(_))));
}
