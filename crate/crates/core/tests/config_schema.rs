//! The published config schema and the deserializer must agree.

use serde_json::{Map, Value};
use umfda::pipeline::{ExperimentConfig, Preset};

fn schema() -> Value {
    serde_json::from_str(include_str!("../../../schema/experiment.schema.json")).unwrap()
}

fn resolve<'a>(root: &'a Value, s: &'a Value) -> &'a Value {
    match s.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.strip_prefix("#/$defs/").expect("local ref");
            &root["$defs"][name]
        }
        None => s,
    }
}

/// Validates the keyword subset the schema uses; returns the first violation.
fn validate(root: &Value, s: &Value, v: &Value, path: &str) -> Result<(), String> {
    let s = resolve(root, s);
    if let Some(options) = s.get("oneOf").and_then(Value::as_array) {
        let n = options.iter().filter(|o| validate(root, o, v, path).is_ok()).count();
        return if n == 1 { Ok(()) } else { Err(format!("{path}: {n} oneOf branches match")) };
    }
    if let Some(allowed) = s.get("enum").and_then(Value::as_array) {
        return if allowed.contains(v) { Ok(()) } else { Err(format!("{path}: {v} not in enum")) };
    }
    let ty = s.get("type").and_then(Value::as_str);
    let ok = match ty {
        Some("object") => v.is_object(),
        Some("array") => v.is_array(),
        Some("integer") => v.is_u64() || v.is_i64(),
        Some("number") => v.is_number(),
        Some("string") => v.is_string(),
        Some("boolean") => v.is_boolean(),
        _ => true,
    };
    if !ok {
        return Err(format!("{path}: expected {ty:?}, got {v}"));
    }
    if let Some(x) = v.as_f64() {
        let bound = |k: &str| s.get(k).and_then(Value::as_f64);
        if bound("minimum").is_some_and(|b| x < b)
            || bound("maximum").is_some_and(|b| x > b)
            || bound("exclusiveMinimum").is_some_and(|b| x <= b)
            || bound("exclusiveMaximum").is_some_and(|b| x >= b)
        {
            return Err(format!("{path}: {x} out of range"));
        }
    }
    if let Some(obj) = v.as_object() {
        let props = s.get("properties").and_then(Value::as_object).cloned().unwrap_or_default();
        for r in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(r.as_str().unwrap()) {
                return Err(format!("{path}: missing {r}"));
            }
        }
        for (k, child) in obj {
            match props.get(k) {
                Some(ps) => validate(root, ps, child, &format!("{path}.{k}"))?,
                None if s.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{path}: unexpected {k}"));
                }
                None => {}
            }
        }
    }
    if let Some(arr) = v.as_array() {
        let count = |k: &str| s.get(k).and_then(Value::as_u64).map(|n| n as usize);
        if count("minItems").is_some_and(|n| arr.len() < n) || count("maxItems").is_some_and(|n| arr.len() > n) {
            return Err(format!("{path}: {} items", arr.len()));
        }
        if let Some(items) = s.get("items") {
            for (i, x) in arr.iter().enumerate() {
                validate(root, items, x, &format!("{path}[{i}]"))?;
            }
        }
    }
    Ok(())
}

fn preset_json(p: Preset) -> Value {
    serde_json::from_str(&ExperimentConfig::preset(p).to_json().unwrap()).unwrap()
}

#[test]
fn presets_conform_to_schema() {
    let root = schema();
    for p in [Preset::Toy, Preset::Paper] {
        validate(&root, &root, &preset_json(p), "$").unwrap();
    }
}

/// Walks every object the schema describes alongside the toy preset.
fn objects<'a>(root: &'a Value, s: &'a Value, v: &'a Value, path: Vec<String>, out: &mut Vec<(Vec<String>, &'a Map<String, Value>)>) {
    let s = resolve(root, s);
    if let (Some(props), Some(obj)) = (s.get("properties").and_then(Value::as_object), v.as_object()) {
        out.push((path.clone(), props));
        for (k, ps) in props {
            if let Some(child) = obj.get(k) {
                let mut p = path.clone();
                p.push(k.clone());
                objects(root, ps, child, p, out);
            }
        }
    }
}

#[test]
fn required_fields_match_deserializer() {
    let root = schema();
    let toy = preset_json(Preset::Toy);
    let mut found = Vec::new();
    objects(&root, &root, &toy, Vec::new(), &mut found);
    let mut checked = 0;
    for (path, props) in found {
        let node = path.iter().fold(&root, |s, k| &resolve(&root, s)["properties"][k]);
        let required: Vec<&str> = resolve(&root, node)
            .get("required")
            .and_then(Value::as_array)
            .map(|r| r.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        for key in props.keys() {
            let mut v = toy.clone();
            let parent = path.iter().fold(&mut v, |v, k| &mut v[k]);
            if parent.as_object_mut().unwrap().remove(key).is_none() {
                continue;
            }
            let parsed = ExperimentConfig::from_json(&v.to_string());
            let is_required = required.contains(&key.as_str());
            assert_eq!(parsed.is_err(), is_required, "{}.{key}: schema required = {is_required}", path.join("."));
            checked += 1;
        }
    }
    assert!(checked > 40, "only {checked} fields checked");
}

#[test]
fn schema_rejects_what_validation_rejects() {
    let root = schema();
    let mut v = preset_json(Preset::Toy);
    v["train"]["threshold"] = 1.0.into();
    assert!(validate(&root, &root, &v, "$").is_err());
    assert!(ExperimentConfig::from_json(&v.to_string()).and_then(|c| c.validate()).is_err());

    let mut v = preset_json(Preset::Toy);
    v["train"]["momentum"] = 0.9.into();
    assert!(validate(&root, &root, &v, "$").is_err());
    assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
}
