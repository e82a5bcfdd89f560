//! Wire protocol integration: real TCP round trips against the tier
//! servers, transport transparency, and version administration.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use hypercast_core::encoder::{encode_request, init_encoder_params, EncoderConfig, ItemFeatures};
use hypercast_core::expert::{init_expert_params, ExpertConfig};
use hypercast_core::fm::{export_inference_subgraph, init_fm_params, FmConfig, TaskSpec, FM_PREFIX};
use hypercast_core::params::ParamSet;
use hypercast_core::serving::{
    f64s_to_hex, hex_to_f64s, paramset_checksum, ExpertServer, Publisher, VersionRegistry,
};
use hypercast_core::wire::{
    paramset_to_wire_blocks, serve, ExpertTier, FmEndpoint, FmTier, WireBlock, WireClient,
    WireExpertCandidate, WireRequest, WireResponse,
};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        layers: 1,
        max_history: 6,
        item_embed_dim: 6,
        ctx_embed_dim: 2,
        item_buckets: 32,
        ctx_buckets: 8,
        action_kinds: 5,
        fuse_hidden: 8,
        fuse_identity: false,
    }
}

fn start_fm_tier(params: &ParamSet) -> (hypercast_core::wire::RunningServer, Arc<FmTier>, String) {
    let registry = Arc::new(RwLock::new(VersionRegistry::new()));
    registry
        .write()
        .unwrap()
        .register("fm-a", params.clone(), 0);
    let tier = Arc::new(FmTier::new(registry, tiny_encoder()));
    tier.set_encoder("fm-a", tiny_encoder());
    let handler = Arc::clone(&tier);
    let server = serve("127.0.0.1:0", Arc::new(move |req| handler.handle(req))).unwrap();
    let addr = server.local_addr.to_string();
    (server, tier, addr)
}

#[test]
fn health_and_embeddings_over_tcp_match_in_process() {
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, FM_PREFIX, &tiny_encoder(), 5);
    let (_server, tier, addr) = start_fm_tier(&params);

    let mut client = WireClient::connect(&addr).unwrap();
    let health = client.request(&WireRequest::Health).unwrap();
    assert_eq!(
        health,
        WireResponse::Health {
            status: "ok".into()
        }
    );

    let history = vec![ItemFeatures::history(3, 0, 4, 2)];
    let targets = vec![ItemFeatures::target(9, 0, 5), ItemFeatures::target(2, 0, 5)];
    let resp = client
        .request(&WireRequest::FmEmbed {
            version: Some("fm-a".into()),
            history: history.clone(),
            targets: targets.clone(),
        })
        .unwrap();
    let WireResponse::Embeddings {
        version,
        checksum,
        vectors_hex,
    } = resp
    else {
        panic!("unexpected response");
    };
    assert_eq!(version, "fm-a");
    assert_eq!(checksum, paramset_checksum(&params));
    let direct = encode_request(&params, FM_PREFIX, &tiny_encoder(), &history, &targets).unwrap();
    for (hex, want) in vectors_hex.iter().zip(direct.iter()) {
        let got = hex_to_f64s(hex).unwrap();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(want.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "wire transport altered a bit pattern");
        }
    }
    assert_eq!(tier.requests_served.load(std::sync::atomic::Ordering::SeqCst), 1);
}

#[test]
fn admin_delta_updates_served_weights() {
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, FM_PREFIX, &tiny_encoder(), 6);
    let (_server, _tier, addr) = start_fm_tier(&params);
    let mut client = WireClient::connect(&addr).unwrap();

    // Mutate the trainer and publish everything through the admin path.
    let mut trainer = params.clone();
    let name = trainer.names().next().unwrap().to_string();
    let mut t = trainer.tensor(&name).unwrap().clone();
    t.data_mut()[0] += 1.0;
    trainer.insert(name, t);
    let mut publisher = Publisher::new("fm-a", &trainer);
    let delta = publisher.publish_partial(&trainer, 1.0).unwrap();

    let resp = client
        .request(&WireRequest::AdminApplyDelta {
            version: "fm-a".into(),
            seq: delta.seq,
            now: 7,
            blocks: delta.blocks.iter().map(WireBlock::from_delta).collect(),
        })
        .unwrap();
    let WireResponse::Ack { checksum, .. } = resp else {
        panic!("expected ack");
    };
    assert_eq!(checksum, paramset_checksum(&trainer));

    // Replaying the same sequence is rejected as stale.
    let resp = client
        .request(&WireRequest::AdminApplyDelta {
            version: "fm-a".into(),
            seq: delta.seq,
            now: 8,
            blocks: delta.blocks.iter().map(WireBlock::from_delta).collect(),
        })
        .unwrap();
    assert!(matches!(resp, WireResponse::Error { code, .. } if code == "STALE_DELTA"));

    // Serving now reflects the new weights.
    let history = vec![];
    let targets = vec![ItemFeatures::target(1, 0, 0)];
    let resp = client
        .request(&WireRequest::FmEmbed {
            version: None,
            history,
            targets: targets.clone(),
        })
        .unwrap();
    let WireResponse::Embeddings { vectors_hex, .. } = resp else {
        panic!("expected embeddings");
    };
    let want = encode_request(&trainer, FM_PREFIX, &tiny_encoder(), &[], &targets).unwrap();
    assert_eq!(hex_to_f64s(&vectors_hex[0]).unwrap(), want[0]);
}

#[test]
fn register_version_over_wire_and_serve_it() {
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, FM_PREFIX, &tiny_encoder(), 7);
    let (_server, tier, addr) = start_fm_tier(&params);
    let mut client = WireClient::connect(&addr).unwrap();

    let mut other = ParamSet::new();
    init_encoder_params(&mut other, FM_PREFIX, &tiny_encoder(), 99);
    tier.set_encoder("fm-b", tiny_encoder());
    let resp = client
        .request(&WireRequest::AdminRegisterVersion {
            version: "fm-b".into(),
            now: 3,
            primary: false,
            blocks: paramset_to_wire_blocks(&other),
        })
        .unwrap();
    assert!(matches!(resp, WireResponse::Ack { .. }));

    let targets = vec![ItemFeatures::target(4, 0, 1)];
    let resp = client
        .request(&WireRequest::FmEmbed {
            version: Some("fm-b".into()),
            history: vec![],
            targets: targets.clone(),
        })
        .unwrap();
    let WireResponse::Embeddings { version, vectors_hex, .. } = resp else {
        panic!("expected embeddings");
    };
    assert_eq!(version, "fm-b");
    let want = encode_request(&other, FM_PREFIX, &tiny_encoder(), &[], &targets).unwrap();
    assert_eq!(hex_to_f64s(&vectors_hex[0]).unwrap(), want[0]);

    // Unknown version errors with the protocol code.
    let resp = client
        .request(&WireRequest::FmEmbed {
            version: Some("ghost".into()),
            history: vec![],
            targets,
        })
        .unwrap();
    assert!(matches!(resp, WireResponse::Error { code, .. } if code == "VERSION_INACTIVE"));
}

#[test]
fn expert_tier_predicts_over_tcp_with_remote_fm_fetch() {
    let mut fm_params = ParamSet::new();
    init_encoder_params(&mut fm_params, FM_PREFIX, &tiny_encoder(), 8);
    let (_fm_server, _tier, fm_addr) = start_fm_tier(&fm_params);

    let expert_cfg = ExpertConfig {
        surface_id: 0,
        fm_version: "fm-a".into(),
        fm_dim: 8,
        use_tae: true,
        use_ue: false,
        ue_dim: 8,
        short_encoder: EncoderConfig {
            dim: 4,
            layers: 1,
            max_history: 4,
            item_embed_dim: 3,
            ctx_embed_dim: 2,
            item_buckets: 16,
            ctx_buckets: 8,
            action_kinds: 5,
            fuse_hidden: 4,
            fuse_identity: false,
        },
        short_history_len: 4,
        tasks: vec![TaskSpec::main("click")],
        fusion_hidden: 8,
        fusion_out: 6,
        xf_hidden: 6,
        surface_feature_dim: 2,
        noise_sigma: 0.0,
        dropout_rho: 0.0,
    };
    let expert_params = init_expert_params(&expert_cfg, 9).unwrap();
    let tier = Arc::new(ExpertTier {
        server: ExpertServer::new(expert_params, expert_cfg, tiny_encoder()),
        fm: FmEndpoint::Remote(fm_addr),
    });
    let handler = Arc::clone(&tier);
    let server = serve("127.0.0.1:0", Arc::new(move |req| handler.handle(req))).unwrap();
    let mut client = WireClient::connect(server.local_addr).unwrap();

    let candidates = vec![
        WireExpertCandidate {
            item: ItemFeatures::target(11, 0, 2),
            embedding_version: None,
            embedding_hex: None,
            surface_features: vec![0.3, -0.1],
        },
        WireExpertCandidate {
            item: ItemFeatures::target(12, 0, 2),
            embedding_version: None,
            embedding_hex: None,
            surface_features: vec![0.0, 0.4],
        },
    ];
    // Fetch directive: the expert tier must call the FM tier itself.
    let resp = client
        .request(&WireRequest::ExpertPredict {
            short_history: vec![ItemFeatures::history(5, 0, 1, 1)],
            fm_history: vec![ItemFeatures::history(5, 0, 1, 1)],
            candidates: candidates.clone(),
            user_embedding_hex: None,
            precomputed: false,
        })
        .unwrap();
    let WireResponse::Prediction { probs } = resp else {
        panic!("expected prediction, got {resp:?}");
    };
    assert_eq!(probs["click"].len(), 2);
    for p in &probs["click"] {
        assert!(*p > 0.0 && *p < 1.0);
    }

    // Precomputed embeddings round trip bit-exactly through hex.
    let emb: Vec<f64> = (0..8).map(|i| (i as f64) * 0.125 - 0.4).collect();
    let pre: Vec<WireExpertCandidate> = candidates
        .iter()
        .map(|c| WireExpertCandidate {
            item: c.item.clone(),
            embedding_version: Some("fm-a".into()),
            embedding_hex: Some(f64s_to_hex(&emb)),
            surface_features: c.surface_features.clone(),
        })
        .collect();
    let resp = client
        .request(&WireRequest::ExpertPredict {
            short_history: vec![],
            fm_history: vec![],
            candidates: pre,
            user_embedding_hex: None,
            precomputed: true,
        })
        .unwrap();
    assert!(matches!(resp, WireResponse::Prediction { .. }));

    // A garbled frame yields a BAD_REQUEST error, not a hang.
    let resp = client
        .request(&WireRequest::AdminApplyDelta {
            version: "fm-a".into(),
            seq: 1,
            now: 0,
            blocks: vec![],
        })
        .unwrap();
    assert!(matches!(resp, WireResponse::Error { code, .. } if code == "BAD_REQUEST"));
}

#[test]
fn tier_shutdown_is_clean_and_logging_independent() {
    // Stopping one tier must not disturb another: run two FM tiers, drop
    // one, and keep querying the other.
    let mut params = ParamSet::new();
    init_encoder_params(&mut params, FM_PREFIX, &tiny_encoder(), 10);
    let (server_a, _tier_a, addr_a) = start_fm_tier(&params);
    let (server_b, _tier_b, addr_b) = start_fm_tier(&params);

    let targets = vec![ItemFeatures::target(1, 0, 0)];
    let req = WireRequest::FmEmbed {
        version: Some("fm-a".into()),
        history: vec![],
        targets,
    };
    let mut client_a = WireClient::connect(&addr_a).unwrap();
    let before = client_a.request(&req).unwrap();

    server_b.shutdown();
    drop(addr_b);

    let after = client_a.request(&req).unwrap();
    assert_eq!(before, after);
    server_a.shutdown();
}

#[test]
fn pruned_paramset_wire_blocks_roundtrip() {
    let cfg = FmConfig {
        encoder: tiny_encoder(),
        tasks: vec![TaskSpec::main("like")],
        surfaces: vec![0],
        align_hidden: 4,
        aux_feature_dim: 2,
    };
    let params = init_fm_params(&cfg, 11).unwrap();
    let pruned = export_inference_subgraph(&params);
    let blocks = paramset_to_wire_blocks(&pruned);
    let mut back = ParamSet::new();
    for wb in &blocks {
        let d = wb.to_delta().unwrap();
        back.insert_block(
            d.name.clone(),
            hypercast_core::params::ParamBlock {
                tensor: d.tensor,
                counter: d.counter,
            },
        );
    }
    assert_eq!(back, pruned);
    let map: BTreeMap<&str, u64> = blocks.iter().map(|b| (b.name.as_str(), b.counter)).collect();
    assert_eq!(map.len(), pruned.len());
}
