use approx::assert_relative_eq;
use ecrc::corpus::{parse_corpus_str, serialize_corpus, synth_dataset, LabelVocab, SynthConfig, NUM_CAUSALITIES, NUM_EMOTIONS};
use ecrc::embeddings::{EmbeddingKind, EmbeddingTable, ProviderConfig};
use ecrc::gcnnet::{forward_graph, DropoutMode, GcnParams, TaskTarget};
use ecrc::graphbuild::{
    build_adjacency, build_topology, edge_count_formula, normalize_adjacency, self_loop_degrees, ConversationGraph, GraphVariant, NodeInfo,
};
use ecrc::tensor::Matrix;
use ecrc::textproc::build_tfidf_index;
use ecrc::training::{Model, TaskMetrics};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn odd_n() -> impl Strategy<Value = usize> {
    (1usize..=15).prop_map(|k| 2 * k + 1)
}

fn features(n: usize, d: usize, seed: u64) -> Matrix {
    Matrix::uniform(n, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn blank_nodes(n: usize) -> Vec<NodeInfo> {
    vec![
        NodeInfo {
            t: 0.0,
            l: 0.0,
            p: 0.0,
            top_terms: Vec::new(),
        };
        n
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topology_is_simple_and_counted(n in odd_n()) {
        let edges = build_topology(n).unwrap();
        prop_assert_eq!(edges.len(), edge_count_formula(n));
        let mut seen = std::collections::BTreeSet::new();
        for e in &edges {
            prop_assert!(e.i < e.j && e.j < n);
            prop_assert!(seen.insert((e.i, e.j)));
        }
        for i in 0..n - 1 {
            prop_assert!(seen.contains(&(i, i + 1)));
        }
    }

    #[test]
    fn even_or_tiny_sizes_are_rejected(k in 0usize..12) {
        prop_assert!(build_topology(2 * k).is_err());
    }

    #[test]
    fn normalized_adjacency_is_symmetric_with_bounded_entries(n in odd_n(), d in 1usize..6, seed in any::<u64>()) {
        let x = features(n, d, seed);
        for variant in GraphVariant::ALL {
            let a = build_adjacency(&x, &build_topology(n).unwrap(), variant).unwrap();
            let a_hat = normalize_adjacency(&a).unwrap();
            let deg = self_loop_degrees(&a);
            for i in 0..n {
                prop_assert!(deg[i] >= 1.0);
                for j in 0..n {
                    prop_assert_eq!(a_hat[(i, j)].to_bits(), a_hat[(j, i)].to_bits());
                    prop_assert!(a_hat[(i, j)] >= 0.0 && a_hat[(i, j)] <= 1.0 + 1e-12);
                }
                let row: f64 = (0..n).map(|j| a_hat[(i, j)] * deg[j].sqrt()).sum();
                assert_relative_eq!(row, deg[i].sqrt(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn eval_forward_ignores_node_order(n in odd_n(), seed in any::<u64>(), shuffle in any::<u64>()) {
        let graph = ConversationGraph::from_features("g", features(n, 4, seed), GraphVariant::NodePlusEdge, blank_nodes(n)).unwrap();
        let perm = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(shuffle), n, n).into_vec();
        let moved = graph.permuted(&perm);
        let params = GcnParams::new(4, &[6, 5], seed).unwrap();
        let a = forward_graph(&params, &graph, 0.5, DropoutMode::Eval).unwrap();
        let b = forward_graph(&params, &moved, 0.5, DropoutMode::Eval).unwrap();
        let target = TaskTarget::both(1, 2);
        prop_assert_eq!(a.loss(&target).to_bits(), b.loss(&target).to_bits());
        prop_assert_eq!(a.classification, b.classification);
    }

    #[test]
    fn probabilities_are_distributions(seed in any::<u64>()) {
        let graph = ConversationGraph::from_features("g", features(5, 3, seed), GraphVariant::SentencePlusNode, blank_nodes(5)).unwrap();
        let params = GcnParams::new(3, &[4], seed).unwrap();
        let cls = forward_graph(&params, &graph, 0.5, DropoutMode::Eval).unwrap().classification;
        prop_assert_eq!(cls.emotion.len(), NUM_EMOTIONS);
        prop_assert_eq!(cls.causality.len(), NUM_CAUSALITIES);
        assert_relative_eq!(cls.emotion.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(cls.causality.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weighted_recall_is_accuracy(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..80)) {
        let names = (0..6).map(|i| format!("c{i}")).collect();
        let m = TaskMetrics::from_pairs(names, &pairs).unwrap();
        let acc = pairs.iter().filter(|(t, p)| t == p).count() as f64 / pairs.len() as f64;
        assert_relative_eq!(m.weighted.recall, acc, epsilon = 1e-12);
        assert_relative_eq!(m.accuracy, acc, epsilon = 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.macro_avg.f1));
        prop_assert!((0.0..=1.0).contains(&m.weighted.f1));
    }

    #[test]
    fn embedding_tables_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 0..12)) {
        let mut table = EmbeddingTable::new(EmbeddingKind::Word, 3).unwrap();
        for (i, v) in rows.iter().enumerate() {
            table.insert(format!("tok{i}"), v.clone()).unwrap();
        }
        let back = EmbeddingTable::parse(&table.to_text(), "t").unwrap();
        prop_assert_eq!(back, table);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..6, 1..3)) {
        let convs = synth_dataset(&SynthConfig { n_conversations: 3, seed, ..SynthConfig::default() }).unwrap();
        let model = Model {
            params: GcnParams::new(7, &hidden, seed).unwrap(),
            variant: GraphVariant::SentenceOnly,
            provider: ProviderConfig::hash(seed, 5, 2),
            mix: None,
            max_len: 30,
            labels: LabelVocab::default(),
            tfidf: build_tfidf_index(&convs).unwrap(),
            config: vec![("seed".into(), seed.to_string())],
        };
        let text = model.to_checkpoint();
        let back = Model::from_checkpoint(&text, "ckpt").unwrap();
        prop_assert_eq!(&back.params, &model.params);
        prop_assert_eq!(back.to_checkpoint(), text);
    }

    #[test]
    fn corpora_round_trip(seed in any::<u64>(), n in 1usize..10) {
        let vocab = LabelVocab::default();
        let convs = synth_dataset(&SynthConfig { n_conversations: n, seed, ..SynthConfig::default() }).unwrap();
        let text = serialize_corpus(&convs, &vocab);
        let back = parse_corpus_str(&text, &vocab, "c").unwrap();
        prop_assert_eq!(serialize_corpus(&back, &vocab), text);
    }
}
