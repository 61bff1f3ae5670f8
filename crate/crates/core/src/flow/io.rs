use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ConditionalFlow;
use crate::error::{Error, Result};

pub const FLOW_FORMAT_TAG: &str = "flowcheck-flow/v1";

#[derive(Serialize, Deserialize)]
struct FlowFile {
    format: String,
    flow: ConditionalFlow,
}

/// Writes the flow as pretty-printed JSON tagged with [`FLOW_FORMAT_TAG`].
pub fn save_flow(flow: &ConditionalFlow, path: impl AsRef<Path>) -> Result<()> {
    let file = FlowFile {
        format: FLOW_FORMAT_TAG.to_string(),
        flow: flow.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_flow(path: impl AsRef<Path>) -> Result<ConditionalFlow> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(FLOW_FORMAT_TAG) => {}
        Some(other) => {
            return Err(Error::Format(format!(
                "flow file has format tag {other:?}, expected {FLOW_FORMAT_TAG:?}"
            )))
        }
        None => return Err(Error::Format("flow file has no format tag".into())),
    }
    let file: FlowFile = serde_json::from_value(value)?;
    file.flow.check_structure()?;
    Ok(file.flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArch;
    use crate::numerics::RngStream;

    #[test]
    fn round_trip_preserves_flow() {
        let dir = tempfile::tempdir().unwrap();
        let flow =
            ConditionalFlow::random(3, 2, FlowArch::default(), 0.2, &mut RngStream::new(1, 0)).unwrap();
        let p = dir.path().join("flow.json");
        save_flow(&flow, &p).unwrap();
        assert_eq!(load_flow(&p).unwrap(), flow);
    }

    #[test]
    fn wrong_tag_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let flow = ConditionalFlow::constant_affine(1, &[0.0], &[0.0]).unwrap();
        let p = dir.path().join("flow.json");
        save_flow(&flow, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap().replace(FLOW_FORMAT_TAG, "flowcheck-flow/v0");
        fs::write(&p, text).unwrap();
        let err = load_flow(&p).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("flowcheck-flow/v0"));
    }
}
