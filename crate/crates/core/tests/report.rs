use std::path::PathBuf;

use fedle_core::engine::{prepare_data, run_with_data};
use fedle_core::report::{
    render_accuracy_chart, render_clusters, render_embedding_scatter, render_rounds_table,
    render_similarity_heatmap, ComparisonSet, HistoryGroup, RoundsTable,
};
use fedle_core::similarity::{build_similarity_matrix, cluster_clients, ClusterOptions, ClusterSpace};
use fedle_core::{ExperimentConfig, ExperimentHistory, Metric, RunMode, SimilarityMatrix, Strategy};

/// Small energy-only run with a deterministic, hand-set accuracy curve so
/// the chart does not depend on training numerics.
fn history(strategy: Strategy, seed: u64, rounds: usize) -> ExperimentHistory {
    let cfg = ExperimentConfig {
        strategy,
        max_rounds: rounds,
        ..ExperimentConfig::default()
    }
    .with_seed(seed);
    let data = prepare_data(&cfg).unwrap();
    let mut h = run_with_data(&cfg, &data, RunMode::EnergyOnly).unwrap();
    for r in &mut h.rounds {
        r.test_accuracy = 0.1 + 0.01 * r.round as f64 + 0.005 * seed as f64 + 0.02 * strategy as usize as f64;
    }
    h
}

fn comparison(rounds: usize) -> ComparisonSet {
    let groups = Strategy::ALL
        .iter()
        .map(|&s| HistoryGroup {
            name: s.display_name().into(),
            histories: (0..2).map(|seed| history(s, seed, rounds)).collect(),
        })
        .collect();
    ComparisonSet::new("accuracy", groups).unwrap()
}

fn matrix() -> SimilarityMatrix {
    let vectors = vec![
        vec![1.0, 0.0, 0.1],
        vec![0.9, 0.1, 0.0],
        vec![0.0, 1.0, 0.2],
        vec![0.1, 0.9, 0.1],
        vec![0.2, 0.1, 1.0],
    ];
    build_similarity_matrix(&vectors, Metric::Cosine).unwrap()
}

fn parse(svg: &str) -> roxmltree::Document<'_> {
    roxmltree::Document::parse(svg).unwrap_or_else(|e| panic!("malformed SVG: {e}"))
}

fn count(doc: &roxmltree::Document<'_>, tag: &str, class: Option<&str>) -> usize {
    doc.descendants()
        .filter(|n| n.has_tag_name(tag) && class.is_none_or(|c| n.attribute("class") == Some(c)))
        .count()
}

/// Compares against `tests/golden/<name>`; `UPDATE_GOLDEN=1` rewrites it.
fn golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()));
    assert!(expected == actual, "{name} differs from golden output");
}

#[test]
fn accuracy_chart_has_one_series_and_band_per_group() {
    let set = comparison(6);
    let svg = render_accuracy_chart(&set);
    let doc = parse(&svg);
    assert_eq!(count(&doc, "polyline", Some("series")), 3);
    assert_eq!(count(&doc, "polygon", Some("band")), 3);
    for name in ["FedLE", "FedAvg-B", "FedBO"] {
        assert!(svg.contains(&format!("{name} (n=2)")), "legend lacks {name}");
    }
    assert!(svg.contains(">round<") && svg.contains(">test accuracy<"));
    assert_eq!(svg, render_accuracy_chart(&set));
    golden("accuracy.svg", &svg);
}

#[test]
fn single_round_chart_is_well_formed() {
    let set = comparison(1);
    let svg = render_accuracy_chart(&set);
    let doc = parse(&svg);
    assert_eq!(count(&doc, "polyline", Some("series")), 3);
    assert!(count(&doc, "circle", None) >= 3);
    assert!(!svg.contains("NaN") && !svg.contains("inf"));
}

#[test]
fn bands_span_the_runs_that_reached_each_round() {
    let set = comparison(4);
    for g in 0..set.groups.len() {
        let bands = set.bands(g);
        assert_eq!(bands.len(), 4);
        for b in bands {
            assert!(b.min <= b.mean && b.mean <= b.max);
            assert!((b.max - b.min - 0.005).abs() < 1e-12);
        }
    }
}

#[test]
fn heatmap_has_one_cell_per_pair() {
    let m = matrix();
    let svg = render_similarity_heatmap(&m);
    let doc = parse(&svg);
    let cells = doc
        .descendants()
        .find(|n| n.attribute("class") == Some("cells"))
        .unwrap();
    assert_eq!(cells.children().filter(|n| n.has_tag_name("rect")).count(), 25);
    assert!(svg.contains("Cosine scale: min="));
    golden("similarity.svg", &svg);

    let constant = build_similarity_matrix(&[vec![1.0, 1.0], vec![2.0, 2.0]], Metric::Cosine).unwrap();
    parse(&render_similarity_heatmap(&constant));
}

#[test]
fn cluster_scatter_marks_every_client_and_the_anchors() {
    let m = matrix();
    let model = cluster_clients(
        &m,
        &ClusterOptions { k: 3, space: ClusterSpace::Embedding, seed: 1, max_iters: 100, tol: 1e-9 },
    )
    .unwrap();
    let svg = render_clusters(&m, &model).unwrap();
    let doc = parse(&svg);
    let markers: Vec<_> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("marker"))
        .collect();
    assert_eq!(markers.len(), 5);
    for (i, n) in markers.iter().enumerate() {
        assert_eq!(n.attribute("data-client"), Some(i.to_string().as_str()));
        assert_eq!(n.attribute("data-cluster"), Some(model.labels[i].to_string().as_str()));
    }
    let (a, b) = model.anchor_pair;
    assert!(svg.contains(&format!("α={a}")) && svg.contains(&format!("β={b}")));
    golden("clusters.svg", &svg);

    assert!(render_embedding_scatter(&[[0.0, 1.0]], &[0, 1], None).is_err());
}

#[test]
fn rounds_table_round_trips_through_csv() {
    let set = comparison(3);
    let table = RoundsTable::from_histories(set.histories()).unwrap();
    assert_eq!(table.strategies, ["fedle", "fedavg_b", "fedbo"]);
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].cells, [Some(3.0), Some(3.0), Some(3.0)]);
    let csv = table.to_csv();
    assert_eq!(RoundsTable::from_csv(&csv).unwrap(), table);
    let text = render_rounds_table(&set).unwrap();
    assert!(text.contains("FedAvg-B") && text.contains("50%"));
    golden("rounds_table.txt", &text);
}

#[test]
fn single_history_gives_a_one_cell_table() {
    let h = history(Strategy::FedBo, 0, 2);
    let table = RoundsTable::from_histories([&h]).unwrap();
    assert_eq!(table.strategies, ["fedbo"]);
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].cells, [Some(2.0)]);
}

#[test]
fn rows_are_ordered_by_low_power_fraction() {
    let mut hs = Vec::new();
    for f in [0.7, 0.3, 0.5] {
        let mut h = history(Strategy::FedAvgB, 0, 2);
        h.config.low_power_fraction = f;
        hs.push(h);
    }
    let table = RoundsTable::from_histories(&hs).unwrap();
    let fracs: Vec<f64> = table.rows.iter().map(|r| r.low_power_fraction).collect();
    assert_eq!(fracs, [0.3, 0.5, 0.7]);
}

#[test]
fn mixed_client_counts_cannot_be_compared() {
    let a = history(Strategy::FedLe, 0, 2);
    let mut b = a.clone();
    b.config.client_count = 20;
    let err = ComparisonSet::new(
        "bad",
        vec![
            HistoryGroup { name: "a".into(), histories: vec![a] },
            HistoryGroup { name: "b".into(), histories: vec![b] },
        ],
    )
    .unwrap_err();
    assert!(matches!(err, fedle_core::Error::ComparisonInvalid(_)));
    assert!(ComparisonSet::new("empty", vec![]).is_err());
}

#[test]
fn malformed_csv_names_the_line() {
    let err = RoundsTable::from_csv("setup,low_power_fraction,fedle\nsynthetic/mlp-32,abc,3\n").unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}
