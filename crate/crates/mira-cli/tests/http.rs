//! HTTP service tests against the real binary: spawn `mira serve` on an
//! ephemeral port, parse the bound address from its log line, and drive
//! every endpoint, including the CLI/HTTP byte-identity check.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};

struct Service {
    child: Child,
    base: String,
    _dir: tempfile::TempDir,
    dir_path: std::path::PathBuf,
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn write_fixtures(dir: &std::path::Path) {
    let img_a: Vec<u8> = (0..500u32).map(|i| ((i * 3) % 251) as u8).collect();
    std::fs::write(dir.join("imgA.bin"), &img_a).unwrap();
    let img_b: Vec<u8> = (0..500u32).map(|i| ((i * 7 + 13) % 251) as u8).collect();
    std::fs::write(dir.join("imgB.bin"), &img_b).unwrap();
    let corpus = format!(
        "text\tkb-1\tOrganizing pneumonia can mimic a tumor on chest imaging and is confirmed by biopsy.\n\
text\tkb-2\tFungal lung infections resemble malignancy on CT scans in immunocompromised patients.\n\
image\timg-a\t{}\n\
image\timg-b\t{}\n",
        dir.join("imgA.bin").display(),
        dir.join("imgB.bin").display()
    );
    std::fs::write(dir.join("corpus.tsv"), corpus).unwrap();
    let script = "The finding is most consistent with an inflammatory process.\n\
---\n\
1. Check the inflammatory reading against [text_1].\n\
2. Note the differential includes fungal mimics [image_1].\n\
---\n\
An inflammatory process remains most likely [text_1]; fungal mimics considered [image_1].\n";
    std::fs::write(dir.join("script.txt"), script).unwrap();
    std::fs::write(
        dir.join("mira.cfg"),
        format!(
            "relevance_threshold=-1.0\nonline_enabled=false\nendpoint.generator=script:{}\n",
            dir.join("script.txt").display()
        ),
    )
    .unwrap();
    std::fs::write(dir.join("fail.txt"), "<FAIL>\n---\n<FAIL>\n---\n<FAIL>\n").unwrap();
    std::fs::write(
        dir.join("degraded.cfg"),
        format!(
            "relevance_threshold=-1.0\nonline_enabled=false\nendpoint.generator=script:{}\n",
            dir.join("fail.txt").display()
        ),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mira"))
        .args([
            "index-build",
            "--corpus",
            dir.join("corpus.tsv").to_str().unwrap(),
            "--index",
            dir.join("kb.idx").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "index-build failed: {out:?}");
}

fn start_service(config_name: &str) -> Service {
    let dir = tempfile::tempdir().unwrap();
    write_fixtures(dir.path());
    let dir_path = dir.path().to_path_buf();
    let mut child = Command::new(env!("CARGO_BIN_EXE_mira"))
        .args([
            "serve",
            "--config",
            dir.path().join(config_name).to_str().unwrap(),
            "--index",
            dir.path().join("kb.idx").to_str().unwrap(),
            "--port",
            "0",
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    // The first log line carries the bound address.
    let stderr = child.stderr.take().unwrap();
    let mut reader = BufReader::new(stderr);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let addr = line
        .split("addr=")
        .nth(1)
        .map(str::trim)
        .unwrap_or_else(|| panic!("no addr in log line {line:?}"));
    let port = addr.rsplit(':').next().unwrap();
    let base = format!("http://127.0.0.1:{port}");
    // Keep draining stderr so the child never blocks on a full pipe.
    std::thread::spawn(move || {
        let mut sink = String::new();
        while reader.read_line(&mut sink).map(|n| n > 0).unwrap_or(false) {
            sink.clear();
        }
    });
    Service {
        child,
        base,
        _dir: dir,
        dir_path,
    }
}

fn multipart_body(text: &str, image: Option<(&str, &[u8])>) -> (String, Vec<u8>) {
    let boundary = "MiraTestBoundary42";
    let mut body = Vec::new();
    write!(
        body,
        "--{boundary}\r\nContent-Disposition: form-data; name=\"text\"\r\n\r\n{text}\r\n"
    )
    .unwrap();
    if let Some((name, bytes)) = image {
        write!(
            body,
            "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"{name}\"\r\n\r\n"
        )
        .unwrap();
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    write!(body, "--{boundary}--\r\n").unwrap();
    (format!("multipart/form-data; boundary={boundary}"), body)
}

#[test]
fn full_service_flow() {
    let service = start_service("mira.cfg");
    let agent = ureq::AgentBuilder::new()
        .timeout(std::time::Duration::from_secs(10))
        .build();

    // Health reports the index size.
    let health: serde_json::Value = agent
        .get(&format!("{}/v1/health", service.base))
        .call()
        .unwrap()
        .into_json()
        .unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["index_records"], 4);

    // Multipart query with an image.
    let image_bytes: Vec<u8> = (0..500u32).map(|i| ((i * 3) % 251) as u8).collect();
    let (ctype, body) = multipart_body(
        "Is it a malignant lesion?",
        Some(("imgA.bin", &image_bytes)),
    );
    let reply: serde_json::Value = agent
        .post(&format!("{}/v1/query", service.base))
        .set("Content-Type", &ctype)
        .send_bytes(&body)
        .unwrap()
        .into_json()
        .unwrap();
    let rtra = reply["rtra"].as_str().unwrap();
    assert!(rtra.contains("Final: An inflammatory process remains most likely [text_1]"));
    assert_eq!(reply["rewrite_provider"], "RuleBased");
    assert!(reply["reward"].as_f64().unwrap() > 0.0);
    let trace_weights: Vec<f64> = reply["trace"]["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((trace_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);

    // CLI query over identical inputs yields a byte-identical record.
    let cli = Command::new(env!("CARGO_BIN_EXE_mira"))
        .args([
            "query",
            "--config",
            service.dir_path.join("mira.cfg").to_str().unwrap(),
            "--index",
            service.dir_path.join("kb.idx").to_str().unwrap(),
            "--image",
            service.dir_path.join("imgA.bin").to_str().unwrap(),
            "--text",
            "Is it a malignant lesion?",
        ])
        .output()
        .unwrap();
    assert!(cli.status.success(), "{cli:?}");
    let cli_record = String::from_utf8(cli.stdout).unwrap();
    assert_eq!(
        cli_record, rtra,
        "CLI and HTTP records must be byte-identical"
    );

    // The attention trace is retrievable by query id.
    let query_id = reply["query_id"].as_str().unwrap();
    let trace: serde_json::Value = agent
        .get(&format!("{}/v1/trace/{query_id}", service.base))
        .call()
        .unwrap()
        .into_json()
        .unwrap();
    assert_eq!(
        trace["component_labels"],
        reply["trace"]["component_labels"]
    );

    // Unknown trace ids are 404.
    let missing = agent.get(&format!("{}/v1/trace/nope", service.base)).call();
    assert!(matches!(missing, Err(ureq::Error::Status(404, _))));

    // Index writes land and show up in health.
    let added: serde_json::Value = agent
        .post(&format!("{}/v1/index/records", service.base))
        .send_json(serde_json::json!({
            "id": "new-1",
            "modality": "text",
            "content": "a new chunk about effusions",
            "metadata": {"source": "api"}
        }))
        .unwrap()
        .into_json()
        .unwrap();
    assert_eq!(added["index_records"], 5);
    let dup = agent
        .post(&format!("{}/v1/index/records", service.base))
        .send_json(serde_json::json!({
            "id": "new-1",
            "modality": "text",
            "content": "same id"
        }));
    assert!(matches!(dup, Err(ureq::Error::Status(400, _))));

    // Missing text field is a 400.
    let (ctype, body) = multipart_body("", None);
    let bad = agent
        .post(&format!("{}/v1/query", service.base))
        .set("Content-Type", &ctype)
        .send_bytes(&body);
    assert!(matches!(bad, Err(ureq::Error::Status(400, _))));

    // Non-multipart bodies are a 400 too.
    let bad = agent
        .post(&format!("{}/v1/query", service.base))
        .send_json(serde_json::json!({"text": "hi"}));
    assert!(matches!(bad, Err(ureq::Error::Status(400, _))));

    // Unknown endpoints are 404.
    let missing = agent.get(&format!("{}/v1/nope", service.base)).call();
    assert!(matches!(missing, Err(ureq::Error::Status(404, _))));
}

#[test]
fn degraded_generator_yields_503_with_detail() {
    // degraded.cfg points at a script generator that always fails.
    let service = start_service("degraded.cfg");
    let agent = ureq::AgentBuilder::new()
        .timeout(std::time::Duration::from_secs(10))
        .build();
    let (ctype, body) = multipart_body("Is it a malignant lesion?", None);
    let reply = agent
        .post(&format!("{}/v1/query", service.base))
        .set("Content-Type", &ctype)
        .send_bytes(&body);
    match reply {
        Err(ureq::Error::Status(503, resp)) => {
            let detail: serde_json::Value = resp.into_json().unwrap();
            assert!(detail["detail"]
                .as_array()
                .unwrap()
                .iter()
                .any(|f| f == "initial_generation_failed"));
        }
        other => panic!("expected 503, got {other:?}"),
    }
}
