//! CLI surface tests driven through the compiled binary: exit codes,
//! line-delimited JSON on stdout, config-file defaults, and flag
//! precedence.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture_catalog() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/catalog/catalog.json")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smartcube"))
        .args(args)
        .output()
        .unwrap()
}

/// Every stdout line must parse as JSON; anything else is a contract
/// violation regardless of what the test was probing.
fn events(output: &Output) -> Vec<Value> {
    String::from_utf8(output.stdout.clone())
        .unwrap()
        .lines()
        .map(|line| {
            serde_json::from_str(line)
                .unwrap_or_else(|e| panic!("non-JSON stdout line {line:?}: {e}"))
        })
        .collect()
}

const FULL_WINDOW: [&str; 4] = ["--start", "2024-03-01T00:00:00Z", "--end", "2024-04-01T00:00:00Z"];

#[test]
fn search_lists_items_ascending_and_exits_zero() {
    let catalog = fixture_catalog();
    let output = run(&[
        "catalog",
        "search",
        "--catalog",
        catalog.to_str().unwrap(),
        "--bbox",
        "9.99,58.99,10.01,59.01",
        FULL_WINDOW[0],
        FULL_WINDOW[1],
        FULL_WINDOW[2],
        FULL_WINDOW[3],
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let events = events(&output);
    let items: Vec<&Value> = events.iter().filter(|e| e["event"] == "item").collect();
    assert_eq!(items.len(), 12);
    let keys: Vec<(String, String)> = items
        .iter()
        .map(|e| {
            (
                e["datetime"].as_str().unwrap().to_string(),
                e["id"].as_str().unwrap().to_string(),
            )
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted, "items not ascending by (datetime, id)");
    assert_eq!(events.last().unwrap()["event"], "search");
    assert_eq!(events.last().unwrap()["items"], 12);
}

#[test]
fn missing_required_flag_is_a_usage_error_naming_the_key() {
    let catalog = fixture_catalog();
    let scratch = tempfile::tempdir().unwrap();
    let out = scratch.path().join("cube");
    // Everything but --bbox.
    let output = run(&[
        "cube",
        "build",
        "--catalog",
        catalog.to_str().unwrap(),
        "--bands",
        "red,nir",
        "--resolution",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("bbox"), "stderr does not name the missing key: {stderr}");
}

#[test]
fn empty_search_is_a_data_error() {
    let catalog = fixture_catalog();
    let scratch = tempfile::tempdir().unwrap();
    let out = scratch.path().join("cube");
    let output = run(&[
        "cube",
        "build",
        "--catalog",
        catalog.to_str().unwrap(),
        "--bbox",
        "9.99,58.99,10.01,59.01",
        "--start",
        "2030-01-01T00:00:00Z",
        "--end",
        "2030-02-01T00:00:00Z",
        "--bands",
        "red,nir",
        "--resolution",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error:"));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let catalog = fixture_catalog();
    let scratch = tempfile::tempdir().unwrap();
    let config = scratch.path().join("run.conf");
    std::fs::write(
        &config,
        format!(
            "# fixture query, narrow window\n\
             catalog = {}\n\
             bbox = 9.99,58.99,10.01,59.01\n\
             start = 2024-03-01T00:00:00Z\n\
             end = 2024-03-05T00:00:00Z\n\
             bands = red,nir\n",
            catalog.display()
        ),
    )
    .unwrap();

    let narrow = run(&["catalog", "search", "--config", config.to_str().unwrap()]);
    assert!(narrow.status.success());
    assert_eq!(events(&narrow).last().unwrap()["items"], 4);

    // The flag beats the config key: the window widens to all 12 items.
    let wide = run(&[
        "catalog",
        "search",
        "--config",
        config.to_str().unwrap(),
        "--end",
        "2024-04-01T00:00:00Z",
    ]);
    assert!(wide.status.success());
    assert_eq!(events(&wide).last().unwrap()["items"], 12);
}

#[test]
fn build_then_info_round_trip_with_sidecars() {
    let catalog = fixture_catalog();
    let scratch = tempfile::tempdir().unwrap();
    let out = scratch.path().join("cube");
    let output = run(&[
        "cube",
        "build",
        "--catalog",
        catalog.to_str().unwrap(),
        "--bbox",
        "9.99,58.99,10.01,59.01",
        FULL_WINDOW[0],
        FULL_WINDOW[1],
        FULL_WINDOW[2],
        FULL_WINDOW[3],
        "--bands",
        "red,nir",
        "--resolution",
        "10",
        "--chunk",
        "2,1,8,8",
        "--workers",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let build_events = events(&output);
    let store = build_events.iter().find(|e| e["event"] == "store").unwrap();
    assert_eq!(store["frames"], 10);

    let metrics_path = build_events
        .iter()
        .find(|e| e["event"] == "metrics")
        .unwrap()["path"]
        .as_str()
        .unwrap()
        .to_string();
    let metrics = std::fs::read_to_string(metrics_path).unwrap();
    assert!(metrics.starts_with("# HELP "));
    let quality = std::fs::read_to_string(scratch.path().join("quality.json")).unwrap();
    let rows: Vec<Value> = serde_json::from_str(&quality).unwrap();
    assert_eq!(rows.len(), 12, "quality table covers dropped frames too");

    let info = run(&["cube", "info", "--store", out.to_str().unwrap()]);
    assert!(info.status.success(), "{}", String::from_utf8_lossy(&info.stderr));
    let info_events = events(&info);
    assert_eq!(info_events[0]["event"], "info");
    assert_eq!(info_events[0]["frames"], 10);
    assert_eq!(
        info_events[0]["bands"],
        serde_json::json!(["red", "nir"])
    );
}
