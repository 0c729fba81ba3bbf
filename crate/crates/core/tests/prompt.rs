mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use saod::prompt::{
    build_instruction, classify_prediction, compute_stats, generate_prompts, parse_response, query_predictor,
    refine_prompt, ClassPrompt, MockPredictor, Outcome, PromptSet, PromptStats, RemoteClient, RemoteConfig,
};
use saod::raster::Raster;
use saod::scene::{generate_corpus, AnnotationSet, CategorySpec, Instance, Scene, SparseAnnotations};
use saod::{Error, OrientedBox, PredictorError};

const DOTA: [&str; 15] = [
    "plane",
    "ship",
    "storage-tank",
    "baseball-diamond",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "harbor",
    "bridge",
    "large-vehicle",
    "small-vehicle",
    "helicopter",
    "roundabout",
    "soccer-ball-field",
    "swimming-pool",
];

fn set(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

fn subsets(n: usize) -> Vec<BTreeSet<usize>> {
    (0..1usize << n).map(|m| (0..n).filter(|b| m >> b & 1 == 1).collect()).collect()
}

#[test]
fn instruction_template() {
    let s = build_instruction(&DOTA).unwrap();
    assert_eq!(
        s,
        format!(
            "Choose categories presented in the image: {}, none. Choose one or several classes. Answer in one word or a short phrase.",
            DOTA.join(", ")
        )
    );
    assert!(s.contains("swimming-pool, none."));
    assert_eq!(
        build_instruction(&["ship"]).unwrap(),
        "Choose categories presented in the image: ship, none. Choose one or several classes. Answer in one word or a short phrase."
    );
    assert_eq!(build_instruction(&DOTA).unwrap(), s);
    assert!(build_instruction(&Vec::<String>::new()).is_err());
}

#[test]
fn response_parsing() {
    let names = ["plane", "ship", "small-vehicle", "harbor"];
    assert_eq!(parse_response("plane, ship", &names).classes, set(&[0, 1]));
    assert!(parse_response("None", &names).classes.is_empty());
    assert_eq!(parse_response("Plane and small-vehicle.", &names).classes, set(&[0, 2]));
    assert_eq!(parse_response("HARBOR\nship", &names).classes, set(&[1, 3]));
    let odd = parse_response("plane, zeppelin", &names);
    assert_eq!(odd.classes, set(&[0]));
    assert_eq!(odd.unrecognized, 1);
    let junk = parse_response("???", &names);
    assert!(junk.classes.is_empty() && junk.warning);
}

#[test]
fn classification_partitions_all_pairs() {
    let all = subsets(4);
    let mut seen = 0;
    for pred in &all {
        for gt in &all {
            let o = classify_prediction(pred, gt);
            // independent restatement of each bucket
            let none = pred.is_empty() && gt.is_empty();
            let exact = !gt.is_empty() && pred == gt;
            let partly = !pred.is_empty() && pred.is_subset(gt) && pred != gt;
            let error = !(none || exact || partly);
            assert_eq!([none, exact, partly, error].iter().filter(|&&b| b).count(), 1);
            let want = if none {
                Outcome::None
            } else if exact {
                Outcome::Exact
            } else if partly {
                Outcome::Partly
            } else {
                Outcome::Error
            };
            assert_eq!(o, want, "{pred:?} vs {gt:?}");
            seen += 1;
        }
    }
    assert_eq!(seen, 256);
    assert_eq!(classify_prediction(&set(&[]), &set(&[])), Outcome::None);
    assert_eq!(classify_prediction(&set(&[1]), &set(&[0, 1])), Outcome::Partly);
    assert_eq!(classify_prediction(&set(&[1, 8]), &set(&[1])), Outcome::Error);
}

fn sparse_with(scene_id: u64, classes: &[usize]) -> SparseAnnotations {
    let b = OrientedBox::new(5.0, 5.0, 2.0, 1.0, 0.0).unwrap();
    SparseAnnotations {
        scene_id,
        kept_indices: (0..classes.len()).collect(),
        kept: classes.iter().map(|&class_id| Instance { class_id, bbox: b }).collect(),
        removed_count: 0,
    }
}

#[test]
fn refinement_is_a_superset_and_idempotent() {
    let all = subsets(4);
    for pred in &all {
        for kept in &all {
            let p = ClassPrompt { scene_id: 3, classes: pred.clone() };
            let ann = sparse_with(3, &kept.iter().copied().collect::<Vec<_>>());
            let once = refine_prompt(&p, &ann).unwrap();
            assert!(pred.is_subset(&once.classes) && kept.is_subset(&once.classes));
            assert_eq!(once.classes, pred.union(kept).copied().collect());
            assert_eq!(refine_prompt(&once, &ann).unwrap(), once);
        }
    }
    let p = ClassPrompt { scene_id: 1, classes: set(&[1]) };
    assert_eq!(refine_prompt(&p, &sparse_with(1, &[0])).unwrap().classes, set(&[0, 1]));
    assert_eq!(refine_prompt(&p, &sparse_with(1, &[])).unwrap(), p);
    assert_eq!(refine_prompt(&ClassPrompt::none(1), &sparse_with(1, &[3])).unwrap().classes, set(&[3]));
    assert!(matches!(refine_prompt(&p, &sparse_with(2, &[0])), Err(Error::InvalidArgument(_))));
}

fn rank(o: Outcome) -> u8 {
    match o {
        Outcome::Error => 0,
        Outcome::Partly => 1,
        Outcome::Exact | Outcome::None => 2,
    }
}

#[test]
fn refinement_with_true_classes_never_worsens_the_outcome() {
    let all = subsets(4);
    for gt in &all {
        for pred in &all {
            for kept in all.iter().filter(|k| k.is_subset(gt)) {
                let before = classify_prediction(pred, gt);
                let after: BTreeSet<usize> = pred.union(kept).copied().collect();
                let after = classify_prediction(&after, gt);
                assert!(rank(after) >= rank(before), "{pred:?} + {kept:?} vs {gt:?}");
                if before == Outcome::None {
                    assert_eq!(after, Outcome::None);
                }
            }
        }
    }
}

fn corpus() -> saod::scene::Corpus {
    let specs = vec![
        CategorySpec::new(0, "plane", 9.0),
        CategorySpec::new(1, "ship", 4.0),
        CategorySpec::new(2, "storage-tank", 2.5),
        CategorySpec::new(3, "small-vehicle", 1.5),
        CategorySpec::new(4, "harbor", 1.0),
    ];
    generate_corpus(&specs, 300, 3.0, 41).unwrap()
}

#[test]
fn errors_fall_as_refinement_labels_rise() {
    let corpus = corpus();
    let mock = MockPredictor::stochastic(corpus.category_names(), 0.6, 5).unwrap();
    let raw = generate_prompts(&mock, &corpus, 1).unwrap();
    let mut last = compute_stats(&raw, &corpus).unwrap();
    let mut counts = vec![last.error_count];
    for rate in [0.0, 0.01, 0.02, 0.05, 0.10] {
        let ann = AnnotationSet::build_pooled(&corpus, rate, false, 9).unwrap();
        let stats = compute_stats(&raw.refine(&ann).unwrap(), &corpus).unwrap();
        assert_eq!(stats.total(), corpus.scenes.len());
        assert!(stats.error_count <= last.error_count, "errors rose at rate {rate}: {counts:?}");
        counts.push(stats.error_count);
        last = stats;
    }
    assert!(counts.last() < counts.first(), "{counts:?}");
}

#[test]
fn perfect_mock_makes_no_errors() {
    let corpus = corpus();
    let mock = MockPredictor::stochastic(corpus.category_names(), 1.0, 5).unwrap();
    let prompts = generate_prompts(&mock, &corpus, 2).unwrap();
    let stats = compute_stats(&prompts, &corpus).unwrap();
    assert_eq!(stats.error_count, 0);
    assert_eq!(stats.partly_count, 0);
    assert_eq!(prompts, PromptSet::ground_truth(&corpus));
    assert_eq!(stats.correct_fraction(), 1.0);
}

#[test]
fn mock_draws_do_not_depend_on_concurrency() {
    let corpus = corpus();
    let mock = MockPredictor::stochastic(corpus.category_names(), 0.7, 8).unwrap();
    assert_eq!(generate_prompts(&mock, &corpus, 1).unwrap(), generate_prompts(&mock, &corpus, 4).unwrap());
}

fn bare_scene(id: u64, classes: &[usize]) -> Scene {
    let b = OrientedBox::new(4.0, 4.0, 2.0, 1.0, 0.0).unwrap();
    Scene {
        id,
        features: Raster::filled(8, 8, 1, 0.0),
        instances: classes.iter().map(|&class_id| Instance { class_id, bbox: b }).collect(),
        clutter: Vec::new(),
    }
}

#[test]
fn stats_hand_fixture() {
    let names = ["plane", "ship", "bridge"];
    let scenes = [bare_scene(0, &[]), bare_scene(1, &[0, 1]), bare_scene(2, &[0, 1]), bare_scene(3, &[1])];
    let replies: BTreeMap<u64, String> = [(0, "none"), (1, "plane, ship"), (2, "ship"), (3, "ship, bridge")]
        .into_iter()
        .map(|(k, v)| (k, v.to_owned()))
        .collect();
    let mock = MockPredictor::fixed(replies);
    let mut stats = PromptStats::default();
    for s in &scenes {
        let p = query_predictor(&mock, s, &names).unwrap();
        let gt: BTreeSet<usize> = s.class_set().into_iter().collect();
        stats.record(classify_prediction(&p.classes, &gt));
    }
    assert_eq!((stats.none_count, stats.exact_count, stats.partly_count, stats.error_count), (1, 1, 1, 1));
    assert_eq!(stats.correct_fraction(), 0.75);

    let p = query_predictor(&mock, &bare_scene(1, &[]), &names).unwrap();
    assert_eq!(p.classes, set(&[0, 1]));
    assert!(matches!(
        query_predictor(&mock, &bare_scene(9, &[]), &names),
        Err(Error::Predictor(PredictorError::Config(_)))
    ));
}

#[test]
fn prompt_files_round_trip() {
    let corpus = corpus();
    let mock = MockPredictor::stochastic(corpus.category_names(), 0.5, 1).unwrap();
    let prompts = generate_prompts(&mock, &corpus, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("prompts.json");
    prompts.save(&p).unwrap();
    assert_eq!(PromptSet::load(&p).unwrap(), prompts);
}

/// Replies of a scripted HTTP endpoint, one per request.
#[derive(Clone)]
enum Reply {
    Json(u16, &'static str),
    Silent,
}

struct FakeServer {
    url: String,
    hits: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<String> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut len = 0usize;
    let mut auth = String::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().ok()?;
        }
        if lower.starts_with("authorization:") {
            auth = line.trim().to_owned();
        }
        if line == "\r\n" {
            break;
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(format!("{auth}\n{}", String::from_utf8_lossy(&body)))
}

fn serve(script: Vec<Reply>, seen: Arc<std::sync::Mutex<Vec<String>>>) -> FakeServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/predict", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let reply = script.get(n).or(script.last()).cloned().unwrap();
            if let Some(req) = read_request(&mut stream) {
                seen.lock().unwrap().push(req);
            }
            match reply {
                Reply::Json(status, body) => {
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                }
                Reply::Silent => thread::sleep(Duration::from_millis(800)),
            }
        }
    });
    FakeServer { url, hits }
}

fn client(url: &str, retries: u32) -> RemoteClient {
    let mut cfg = RemoteConfig::new(url);
    cfg.retries = retries;
    cfg.backoff = Duration::ZERO;
    cfg.timeout = Duration::from_millis(300);
    cfg.token = Some("secret".into());
    RemoteClient::new(cfg).unwrap()
}

fn ask(server: &FakeServer, retries: u32) -> saod::Result<ClassPrompt> {
    query_predictor(&client(&server.url, retries), &bare_scene(7, &[0]), &["plane", "ship"])
}

#[test]
fn remote_success_sends_instruction_and_token() {
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let server = serve(vec![Reply::Json(200, r#"{"answer": "Plane and ship"}"#)], seen.clone());
    let p = ask(&server, 2).unwrap();
    assert_eq!(p, ClassPrompt { scene_id: 7, classes: set(&[0, 1]) });
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
    let req = seen.lock().unwrap()[0].clone();
    assert!(req.starts_with("authorization: Bearer secret") || req.starts_with("Authorization: Bearer secret"));
    assert!(req.contains("Choose categories presented in the image: plane, ship, none."));
    let body: serde_json::Value = serde_json::from_str(req.split_once('\n').unwrap().1).unwrap();
    assert_eq!(body["scene_id"], 7);
}

#[test]
fn remote_retries_server_errors() {
    let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
    let server = serve(
        vec![Reply::Json(503, "{}"), Reply::Json(200, r#"{"answer": "none"}"#)],
        seen,
    );
    assert!(ask(&server, 2).unwrap().is_none());
    assert_eq!(server.hits.load(Ordering::SeqCst), 2);

    let server = serve(vec![Reply::Json(500, "{}")], Default::default());
    match ask(&server, 2) {
        Err(Error::Predictor(PredictorError::Http { status: 500 })) => {}
        other => panic!("{other:?}"),
    }
    assert_eq!(server.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_client_errors_are_not_retried() {
    let server = serve(vec![Reply::Json(404, "{}")], Default::default());
    assert!(matches!(ask(&server, 3), Err(Error::Predictor(PredictorError::Http { status: 404 }))));
    assert_eq!(server.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn remote_malformed_reply() {
    let server = serve(vec![Reply::Json(200, "not json")], Default::default());
    assert!(matches!(ask(&server, 3), Err(Error::Predictor(PredictorError::Malformed(_)))));
    let server = serve(vec![Reply::Json(200, r#"{"reply": "plane"}"#)], Default::default());
    assert!(matches!(ask(&server, 3), Err(Error::Predictor(PredictorError::Malformed(_)))));
}

#[test]
fn remote_timeout_after_retries() {
    let server = serve(vec![Reply::Silent], Default::default());
    match ask(&server, 1) {
        Err(Error::Predictor(PredictorError::Timeout { attempts: 2 })) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = client(&format!("http://127.0.0.1:{port}/"), 2);
    match query_predictor(&c, &bare_scene(0, &[]), &["plane"]) {
        Err(Error::Predictor(PredictorError::Transport { attempts: 3, .. })) => {}
        other => panic!("{other:?}"),
    }
    assert!(RemoteClient::new(RemoteConfig::new("")).is_err());
}

#[test]
fn failing_scene_aborts_generation() {
    let corpus = corpus();
    let replies: BTreeMap<u64, String> = (0..10).map(|i| (i, "plane".to_owned())).collect();
    let mock = MockPredictor::fixed(replies);
    assert!(generate_prompts(&mock, &corpus, 2).is_err());
}
