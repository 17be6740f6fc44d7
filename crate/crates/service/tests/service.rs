mod common;

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Barrier};
use std::time::Duration;

use serde_json::{json, Value};
use vsearch_service::config::ServeSettings;
use vsearch_service::deploy::{Deployment, QueryRequest, QueryResponse};
use vsearch_service::wire::{read_frame, spawn, write_frame, Client, Request, Response, ServerHandle, ServiceHandler, MAX_FRAME};
use vsearch_service::ServiceError;

use common::*;

fn start(handler: ServiceHandler) -> ServerHandle {
    spawn(TcpListener::bind("127.0.0.1:0").unwrap(), Arc::new(handler)).unwrap()
}

fn fixture() -> (vsearch::synthetic::Inventory, ServerHandle) {
    let inv = small_inventory(41, 1200, 24);
    let (d, _) = deploy(&inv.items, &scores_map(&inv), &settings(2, 2), true);
    let server = start(ServiceHandler { deployment: Some(d), shard: None });
    (inv, server)
}

fn raw(stream: &mut TcpStream, body: &[u8]) -> Response {
    write_frame(stream, body).unwrap();
    serde_json::from_slice(&read_frame(stream).unwrap().unwrap()).unwrap()
}

fn connect(server: &ServerHandle) -> TcpStream {
    let s = TcpStream::connect(server.addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    s
}

#[test]
fn response_echoes_request_id() {
    let (inv, server) = fixture();
    let mut s = connect(&server);
    for id in [json!(7), json!("abc"), json!({"trace": [1, 2]}), Value::Null] {
        let req = Request { id: id.clone(), method: "ping".into(), params: Value::Null };
        let r = raw(&mut s, &serde_json::to_vec(&req).unwrap());
        assert_eq!(r.id, id);
        assert_eq!(r.result, Some(json!({"pong": true})));
    }
    let q = json!({"id": 99, "method": "query", "params": {"embedding": inv.items[0].embedding.values()}});
    let r = raw(&mut s, q.to_string().as_bytes());
    assert_eq!(r.id, json!(99));
    let resp: QueryResponse = serde_json::from_value(r.result.unwrap()).unwrap();
    assert!(!resp.results.is_empty());
    server.shutdown();
}

#[test]
fn unknown_fields_are_ignored() {
    let (inv, server) = fixture();
    let mut s = connect(&server);
    let embedding = inv.items[3].embedding.values().to_vec();
    let plain = json!({"id": 1, "method": "query", "params": {"embedding": embedding}});
    let extra = json!({
        "id": 1, "method": "query", "client": "v9",
        "params": {"embedding": embedding, "colour": "red", "rerank": {"mode": "x"}}
    });
    let a = raw(&mut s, plain.to_string().as_bytes());
    let b = raw(&mut s, extra.to_string().as_bytes());
    assert!(a.error.is_none());
    assert_eq!(a, b);
    server.shutdown();
}

#[test]
fn request_errors_keep_the_connection_open() {
    let (_, server) = fixture();
    let mut s = connect(&server);
    let r = raw(&mut s, br#"{"id":1,"method":"nope"}"#);
    assert_eq!(r.error.unwrap().kind, "unknown_method");
    let r = raw(&mut s, br#"{"id":2,"method":"query","params":{"embedding":[1.0,2.0]}}"#);
    assert_eq!(r.error.unwrap().kind, "dimension");
    let r = raw(&mut s, br#"{"id":3,"method":"query","params":{"embedding":"x"}}"#);
    assert_eq!(r.error.unwrap().kind, "invalid_params");
    let r = raw(&mut s, br#"{"id":4,"method":"ping"}"#);
    assert!(r.result.is_some());
    server.shutdown();
}

fn expect_closed(s: &mut TcpStream) {
    let mut buf = [0u8; 16];
    assert!(matches!(s.read(&mut buf), Ok(0) | Err(_)));
}

#[test]
fn malformed_frame_gets_an_error_then_close() {
    let (_, server) = fixture();
    let mut s = connect(&server);
    let r = raw(&mut s, b"{not json");
    assert_eq!(r.error.unwrap().kind, "malformed_frame");
    assert_eq!(r.id, Value::Null);
    expect_closed(&mut s);

    // parseable JSON that is not a request keeps its id
    let mut s = connect(&server);
    let r = raw(&mut s, br#"{"id":5,"params":{}}"#);
    assert_eq!((r.id, r.error.unwrap().kind.as_str()), (json!(5), "malformed_frame"));
    expect_closed(&mut s);
    server.shutdown();
}

#[test]
fn oversize_frame_gets_frame_error_then_close() {
    let (_, server) = fixture();
    let mut s = connect(&server);
    s.write_all(&((MAX_FRAME + 1) as u32).to_be_bytes()).unwrap();
    s.write_all(&[b' '; 4096]).unwrap();
    let r: Response = serde_json::from_slice(&read_frame(&mut s).unwrap().unwrap()).unwrap();
    assert_eq!(r.error.unwrap().kind, "frame_too_large");
    expect_closed(&mut s);
    server.shutdown();
}

#[test]
fn concurrent_clients_get_identical_bodies() {
    let (inv, server) = fixture();
    let addr = server.addr();
    let body = json!({"id": 1, "method": "query", "params": {"embedding": inv.items[10].embedding.values()}})
        .to_string()
        .into_bytes();
    let barrier = Arc::new(Barrier::new(100));
    let handles: Vec<_> = (0..100)
        .map(|_| {
            let body = body.clone();
            let barrier = Arc::clone(&barrier);
            std::thread::spawn(move || {
                let mut s = TcpStream::connect(addr).unwrap();
                s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
                barrier.wait();
                write_frame(&mut s, &body).unwrap();
                read_frame(&mut s).unwrap().unwrap()
            })
        })
        .collect();
    let bodies: Vec<Vec<u8>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(serde_json::from_slice::<Response>(&bodies[0]).unwrap().error.is_none());
    assert!(bodies.iter().all(|b| b == &bodies[0]));
    server.shutdown();
}

#[test]
fn remote_shards_answer_like_local_ones() {
    let inv = small_inventory(42, 1500, 24);
    let (local, shards) = deploy(&inv.items, &scores_map(&inv), &settings(3, 2), true);
    let dir = tempfile::tempdir().unwrap();
    local.save(dir.path(), &shards).unwrap();

    // two replicas, each with its own three shard servers
    let servers: Vec<Vec<ServerHandle>> = (0..2)
        .map(|_| {
            shards
                .iter()
                .map(|s| start(ServiceHandler { deployment: None, shard: Some(s.clone()) }))
                .collect()
        })
        .collect();
    let serve = ServeSettings {
        replicas: servers
            .iter()
            .map(|r| r.iter().map(|h| h.addr().to_string()).collect())
            .collect(),
        deadline_ms: Some(5_000),
        ..Default::default()
    };
    let remote = Deployment::load(dir.path(), &serve).unwrap();
    let front = start(ServiceHandler { deployment: Some(remote), shard: None });
    let mut client = Client::connect(front.addr(), Some(Duration::from_secs(30))).unwrap();
    for q in inv.queries(3, 40).unwrap() {
        let req = QueryRequest { embedding: q.embedding.values().to_vec(), ..Default::default() };
        let got: QueryResponse = client.call("query", &req).unwrap();
        assert_eq!(got, local.query(&req).unwrap());
    }
    let err = client.call::<_, QueryResponse>("query", &QueryRequest { embedding: vec![0.0; 3], ..Default::default() });
    assert!(matches!(err, Err(ServiceError::Remote { ref kind, .. }) if kind == "dimension"));

    // losing every shard of the cluster surfaces as unavailable
    drop(client);
    front.shutdown();
    for h in servers.into_iter().flatten() {
        h.shutdown();
    }
    let dead = Deployment::load(dir.path(), &serve).unwrap();
    let req = QueryRequest { embedding: inv.items[0].embedding.values().to_vec(), ..Default::default() };
    assert!(matches!(dead.query(&req), Err(ServiceError::Core(vsearch::Error::Unavailable(_)))));
}
