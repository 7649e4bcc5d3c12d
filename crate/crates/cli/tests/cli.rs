mod common;

use common::{gen_fixtures, run, stderr, stdout, Server};

fn p(path: &std::path::Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = run(&["annotate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert!(o.stdout.is_empty());
}

#[test]
fn unreachable_backend_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen_fixtures(&fx, 2, 3, 1);
    let out = dir.path().join("out.json");
    let o = run(&[
        "annotate", "--fixtures", p(&fx), "--auto", "--backend", "http://127.0.0.1:1",
        "--max-retries", "0", "-o", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("error:"));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1, "temp file left behind");
}

#[test]
fn continue_on_error_reports_skips() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen_fixtures(&fx, 2, 3, 1);
    let out = dir.path().join("out.json");
    let failures = dir.path().join("failures.json");
    let o = run(&[
        "annotate", "--fixtures", p(&fx), "--auto", "--backend", "http://127.0.0.1:1",
        "--max-retries", "0", "--continue-on-error", "--failures", p(&failures), "-o", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let f: serde_json::Value = serde_json::from_slice(&std::fs::read(&failures).unwrap()).unwrap();
    assert_eq!(f.as_array().unwrap().len(), 2);
    assert!(stdout(&o).contains("annotated 0 of 2"));
}

#[test]
fn phrase_mode_and_bad_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen_fixtures(&fx, 3, 3, 2);
    let mock = Server::mock(&fx, &[]);
    let out = dir.path().join("out.json");
    let o = run(&[
        "annotate", "--fixtures", p(&fx), "--phrases", "cat,dog, bottle", "--backend", &mock.url,
        "-o", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stderr.is_empty());
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(doc["info"]["provenance"]["pipeline"], "grounded-sam");

    let o = run(&[
        "annotate", "--fixtures", p(&fx), "--auto", "--backend", &mock.url, "--box-threshold", "1.5",
        "-o", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn caption_source_matches_tags() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen_fixtures(&fx, 3, 3, 4);
    let mock = Server::mock(&fx, &[]);
    let gt = fx.join("ground_truth.coco.json");
    let out = dir.path().join("cap.json");
    let o = run(&[
        "annotate", "--fixtures", p(&fx), "--auto", "--source", "caption", "--backend", &mock.url,
        "-o", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = run(&["evaluate", "--pred", p(&out), "--gt", p(&gt)]);
    assert!(e.status.success());
    assert!(stdout(&e).contains("100.0"), "{}", stdout(&e));
}

#[test]
fn malformed_ground_truth_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.json");
    std::fs::write(&gt, "{\n  \"images\": [,]\n}").unwrap();
    let o = run(&["evaluate", "--pred", p(&gt), "--gt", p(&gt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn missing_file_is_not_found() {
    let o = run(&["evaluate", "--pred", "/nonexistent/a.json", "--gt", "/nonexistent/b.json"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn box_iou_evaluation_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen_fixtures(&fx, 2, 3, 5);
    let gt = fx.join("ground_truth.coco.json");
    let report = dir.path().join("r.json");
    let o = run(&[
        "evaluate", "--pred", p(&gt), "--gt", p(&gt), "--iou-kind", "box", "--report", p(&report),
        "--name", "fixtures", "--label", "self",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("method"));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["datasets"][0]["iou_kind"], "box");
    assert_eq!(r["suite_mean"], 1.0);
}

#[test]
fn edit_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen_fixtures(&fx, 1, 3, 6);
    let mock = Server::mock(&fx, &[]);
    let out = dir.path().join("e.png");
    let base = ["edit", "--fixtures", p(&fx), "--scene", "scene-000", "--backend", &mock.url, "-o", p(&out)];

    let mut args = base.to_vec();
    args.extend(["--target", "unicorn", "--prompt", "x"]);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());

    let mut args = base.to_vec();
    args.extend(["--target", "unicorn"]);
    assert_eq!(run(&args).status.code(), Some(2), "replace without a prompt");

    let mut args = base.to_vec();
    args[4] = "no-such-scene";
    args.extend(["--target", "cat", "--prompt", "x"]);
    assert_eq!(run(&args).status.code(), Some(3));
}

#[test]
fn remove_mode_warns_about_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen_fixtures(&fx, 1, 3, 6);
    let scene: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fx.join("scene-000.scene.json")).unwrap()).unwrap();
    let label = scene["objects"][0]["label"].as_str().unwrap().to_string();
    let mock = Server::mock(&fx, &[]);
    let out = dir.path().join("e.png");
    let o = run(&[
        "edit", "--fixtures", p(&fx), "--scene", "scene-000", "--backend", &mock.url, "--target", &label,
        "--mode", "remove", "--prompt", "ignored", "-o", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    assert!(out.exists());
}

#[test]
fn validate_pipeline_cli() {
    for name in ["grounded-sam", "auto-annotate", "grounded-inpaint", "promptable-mesh"] {
        let o = run(&["validate-pipeline", "--builtin", name]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("order:"));
    }
    assert_eq!(run(&["validate-pipeline", "--builtin", "nope"]).status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut spec = groundseg_core::pipeline::builtin_pipeline("grounded-sam").unwrap();
    spec.bindings.pop();
    std::fs::write(&path, serde_json::to_vec(&spec).unwrap()).unwrap();
    let o = run(&["validate-pipeline", p(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unbound input"), "{}", stderr(&o));
}

#[test]
fn mock_backend_is_deterministic_and_404s_unknown_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    gen_fixtures(&fx, 1, 3, 7);
    let body = r#"{"version":"v1","image":{"image_id":1,"width":8,"height":8,"scene_id":"nope"}}"#;
    let a = Server::mock(&fx, &["--jitter-px", "2", "--seed", "9"]);
    let resp = ureq::post(&format!("{}/v1/tag", a.url))
        .config()
        .http_status_as_error(false)
        .build()
        .send(body)
        .unwrap();
    assert_eq!(resp.status().as_u16(), 404);
    let v: serde_json::Value = serde_json::from_reader(resp.into_body().into_reader()).unwrap();
    assert_eq!(v["error"], "unknown-scene");

    let scene: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fx.join("scene-000.scene.json")).unwrap()).unwrap();
    let labels: Vec<&str> = scene["objects"].as_array().unwrap().iter().map(|o| o["label"].as_str().unwrap()).collect();
    let req = serde_json::json!({
        "version": "v1",
        "image": {"image_id": 1, "width": scene["width"], "height": scene["height"], "scene_id": "scene-000"},
        "phrases": labels,
        "box_threshold": 0.1,
    });
    let detect = |url: &str| -> String {
        ureq::post(&format!("{url}/v1/detect"))
            .send(req.to_string())
            .unwrap()
            .into_body()
            .read_to_string()
            .unwrap()
    };
    let first = detect(&a.url);
    drop(a);
    let b = Server::mock(&fx, &["--jitter-px", "2", "--seed", "9"]);
    assert_eq!(first, detect(&b.url));
}
