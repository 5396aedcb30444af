//! Reference external evaluator for tests and demos. Reads JSON-lines
//! requests on stdin and answers each with the analytic surrogate
//! accuracy of the requested network. Flags simulate misbehavior so
//! protocol error paths can be exercised end to end:
//!
//! - `--delay-ms N`: sleep before each response (timeout testing)
//! - `--bad-id`: echo a wrong request id
//! - `--out-of-range`: respond with accuracy 1.5
//! - `--garbage`: respond with a non-JSON line
//! - `--die-after N`: exit silently after N responses

use coex_core::eval::surrogate_from_counts;
use coex_core::model::{ChildNetwork, LayerSpec, TensorShape};
use std::io::{BufRead, Write};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut delay_ms = 0u64;
    let mut bad_id = false;
    let mut out_of_range = false;
    let mut garbage = false;
    let mut die_after = usize::MAX;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "--delay-ms" => delay_ms = it.next().expect("value").parse().expect("number"),
            "--bad-id" => bad_id = true,
            "--out-of-range" => out_of_range = true,
            "--garbage" => garbage = true,
            "--die-after" => die_after = it.next().expect("value").parse().expect("number"),
            other => panic!("unknown flag {other}"),
        }
    }

    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut served = 0usize;

    for line in stdin.lock().lines() {
        let line = line.expect("readable stdin");
        if line.trim().is_empty() {
            continue;
        }
        if served >= die_after {
            return;
        }
        let req: serde_json::Value = serde_json::from_str(&line).expect("json request");
        let id = req["id"].as_u64().expect("id");
        let input = req["input"].as_array().expect("input");
        let shape = TensorShape::new(
            input[0].as_u64().expect("h") as u32,
            input[1].as_u64().expect("w") as u32,
            input[2].as_u64().expect("c") as u32,
        );
        let layers: Vec<LayerSpec> = req["layers"]
            .as_array()
            .expect("layers")
            .iter()
            .map(|l| {
                let v: Vec<u32> = l
                    .as_array()
                    .expect("layer")
                    .iter()
                    .map(|x| x.as_u64().expect("field") as u32)
                    .collect();
                if v[3] == 1 {
                    LayerSpec::conv(v[0], v[1], v[2])
                } else {
                    LayerSpec::mbconv(v[0], v[1], v[2], v[3])
                }
            })
            .collect();
        let net = ChildNetwork::new(shape, layers);
        let accuracy = surrogate_from_counts(
            net.count_params(),
            net.depth(),
            &coex_core::eval::SurrogateParams::default(),
        );

        if delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(delay_ms));
        }
        served += 1;
        let line = if garbage {
            "totally not json".to_string()
        } else {
            let id = if bad_id { id + 1 } else { id };
            let accuracy = if out_of_range { 1.5 } else { accuracy };
            format!("{{\"id\":{id},\"accuracy\":{accuracy}}}")
        };
        writeln!(out, "{line}").expect("writable stdout");
        out.flush().expect("flushable stdout");
    }
}
