use kaas::config::{ServerConfig, ServiceConfig};
use kaas::http::{serve, ServerHandle};
use kaas::store::StoreSpec;
use kaas_core::backend::{decode_f32s, encode_f32s};
use kaas_core::protocol::{matmul_chain, ErrorKind, KaasResponse};
use kaas_core::router::RoutingPolicy;
use reqwest::StatusCode;

async fn start(service: ServiceConfig, store: StoreSpec) -> (ServerHandle, String) {
    let cfg = ServerConfig {
        bind: "127.0.0.1".into(),
        port: 0,
        store,
        service,
    };
    let handle = serve(&cfg).await.unwrap();
    let base = format!("http://{}", handle.addr);
    (handle, base)
}

fn matmul(a: &[f32], b: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..n {
                acc += a[i * n + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_objects_and_matmul_chain() {
    let (handle, base) = start(ServiceConfig::default(), StoreSpec::Mem).await;
    let http = reqwest::Client::new();

    let health = http.get(format!("{base}/v1/health")).send().await.unwrap();
    assert_eq!(health.status(), StatusCode::OK);
    assert_eq!(health.text().await.unwrap(), "ok");

    let n = 4;
    let a: Vec<f32> = (0..n * n).map(|i| i as f32 * 0.5 - 3.0).collect();
    let b: Vec<f32> = (0..n * n).map(|i| 1.0 / (i as f32 + 1.0)).collect();
    for (k, v) in [("mats/A", &a), ("mats/B", &b)] {
        let r = http.put(format!("{base}/v1/objects/{k}")).body(encode_f32s(v)).send().await.unwrap();
        assert!(r.status().is_success());
    }
    let echoed = http.get(format!("{base}/v1/objects/mats/A")).send().await.unwrap();
    assert_eq!(decode_f32s(&echoed.bytes().await.unwrap()), a);

    let req = matmul_chain("chain-1", n as u32, "mats/A", "mats/B", "mats/D");
    let body = serde_json::to_vec(&req).unwrap();
    let mut times = Vec::new();
    for round in 0..2 {
        let r = http.post(format!("{base}/v1/invoke")).body(body.clone()).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::OK);
        let resp: KaasResponse = serde_json::from_slice(&r.bytes().await.unwrap()).unwrap();
        assert!(resp.status.is_ok(), "{:?}", resp.status);
        assert_eq!(resp.io_stats.store_gets, if round == 0 { 2 } else { 0 });
        assert_eq!(resp.io_stats.store_puts, 1);
        times.push(resp.simulated_total_time);
    }
    assert!(times[1] < times[0]);

    let d = http.get(format!("{base}/v1/objects/mats/D")).send().await.unwrap();
    let c = matmul(&a, &b, n);
    let expected = matmul(&c, &c, n);
    let got = decode_f32s(&d.bytes().await.unwrap());
    assert!(got.iter().zip(&expected).all(|(x, y)| x.to_bits() == y.to_bits()));

    let stats: serde_json::Value = http
        .get(format!("{base}/v1/stats"))
        .send()
        .await
        .unwrap()
        .json_body()
        .await;
    assert_eq!(stats["executors"][0]["requests"], 2);
    assert_eq!(stats["executors"][0]["store_gets"], 2);

    let gone = http.delete(format!("{base}/v1/objects/mats/D")).send().await.unwrap();
    assert!(gone.status().is_success());
    let missing = http.get(format!("{base}/v1/objects/mats/D")).send().await.unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
    let bad = http.put(format!("{base}/v1/objects/bad%20key")).body("x").send().await.unwrap();
    assert_eq!(bad.status(), StatusCode::BAD_REQUEST);

    handle.shutdown().await.unwrap();
}

trait JsonBody {
    async fn json_body(self) -> serde_json::Value;
}

impl JsonBody for reqwest::Response {
    async fn json_body(self) -> serde_json::Value {
        serde_json::from_slice(&self.bytes().await.unwrap()).unwrap()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_and_invalid_requests() {
    let (handle, base) = start(ServiceConfig::default(), StoreSpec::Mem).await;
    let http = reqwest::Client::new();
    let post = |body: &'static str| http.post(format!("{base}/v1/invoke")).body(body).send();

    let r = post("{not json").await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let resp: KaasResponse = serde_json::from_value(r.json_body().await).unwrap();
    assert_eq!(resp.status.error_kind(), Some(ErrorKind::MalformedRequest));

    let r = post(r#"{"request_id":"","buffers":[],"invocations":[]}"#).await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let resp: KaasResponse = serde_json::from_value(r.json_body().await).unwrap();
    assert_eq!(resp.status.error_kind(), Some(ErrorKind::InvalidRequest));

    // A validated request that fails at run time is still a 200.
    let r = post(
        r#"{"request_id":"m","buffers":[{"name":"x","key":"absent","size":4,"is_const":true,"direction":"input"}],
            "invocations":[]}"#,
    )
    .await
    .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let resp: KaasResponse = serde_json::from_value(r.json_body().await).unwrap();
    assert_eq!(resp.status.error_kind(), Some(ErrorKind::NotFound));

    // Lenient mode ignores unknown fields.
    let r = post(r#"{"request_id":"u","buffers":[],"invocations":[],"colour":"red"}"#).await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let resp: KaasResponse = serde_json::from_value(r.json_body().await).unwrap();
    assert!(resp.status.is_ok());
    handle.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn strict_schema_rejects_unknown_fields() {
    let service = ServiceConfig {
        strict_schema: true,
        ..Default::default()
    };
    let (handle, base) = start(service, StoreSpec::Mem).await;
    let http = reqwest::Client::new();
    let r = http
        .post(format!("{base}/v1/invoke"))
        .body(r#"{"request_id":"u","buffers":[],"invocations":[],"colour":"red"}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let resp: KaasResponse = serde_json::from_value(r.json_body().await).unwrap();
    assert_eq!(resp.status.error_kind(), Some(ErrorKind::MalformedRequest));
    handle.shutdown().await.unwrap();
}

#[tokio::test]
async fn zero_capacity_is_rejected_at_startup() {
    let cfg = ServerConfig {
        port: 0,
        service: ServiceConfig {
            capacity: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let err = serve(&cfg).await.unwrap_err();
    assert!(err.to_string().contains("capacity"), "{err}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_clients_on_a_directory_store() {
    let dir = tempfile::tempdir().unwrap();
    let service = ServiceConfig {
        executors: 3,
        policy: RoutingPolicy::Affinity { q_max: 2 },
        ..Default::default()
    };
    let (handle, base) = start(service, StoreSpec::Dir(dir.path().to_path_buf())).await;
    let http = reqwest::Client::new();
    for k in ["A", "B"] {
        let v: Vec<f32> = (0..64).map(|i| (i % 7) as f32).collect();
        http.put(format!("{base}/v1/objects/{k}")).body(encode_f32s(&v)).send().await.unwrap();
    }
    let mut tasks = tokio::task::JoinSet::new();
    for c in 0..8 {
        let http = http.clone();
        let base = base.clone();
        tasks.spawn(async move {
            for i in 0..10 {
                let req = matmul_chain(format!("c{c}-{i}"), 8, "A", "B", &format!("out/{c}"));
                let r = http
                    .post(format!("{base}/v1/invoke"))
                    .body(serde_json::to_vec(&req).unwrap())
                    .send()
                    .await
                    .unwrap();
                let resp: KaasResponse = serde_json::from_slice(&r.bytes().await.unwrap()).unwrap();
                assert!(resp.status.is_ok(), "{:?}", resp.status);
            }
        });
    }
    while let Some(t) = tasks.join_next().await {
        t.unwrap();
    }
    let stats = handle.service.stats();
    assert_eq!(stats.iter().map(|s| s.requests).sum::<u64>(), 80);
    assert_eq!(handle.service.queue_depths(), vec![0, 0, 0]);
    for c in 0..8 {
        assert!(dir.path().join(format!("out%2F{c}")).exists());
    }
    handle.shutdown().await.unwrap();
}
