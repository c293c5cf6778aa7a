//! Camera rig JSON: `{"cameras": [{"K", "R", "T", "width", "height", "name"}]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraRecord, PinholeCamera};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub cameras: Vec<CameraRecord>,
}

impl RigFile {
    pub fn from_cameras(cameras: &[PinholeCamera]) -> Self {
        Self {
            cameras: cameras.iter().map(CameraRecord::from).collect(),
        }
    }

    /// Validated cameras; names must be unique.
    pub fn to_cameras(&self) -> Result<Vec<PinholeCamera>> {
        let cams = self
            .cameras
            .iter()
            .cloned()
            .map(|rec| PinholeCamera::try_from(rec).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        for (i, c) in cams.iter().enumerate() {
            if cams[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Format(format!("camera name {:?} appears twice", c.name)));
            }
        }
        Ok(cams)
    }

    pub fn parse(text: &str) -> Result<Vec<PinholeCamera>> {
        serde_json::from_str::<RigFile>(text)?.to_cameras()
    }
}

pub fn write_rig(path: impl AsRef<Path>, cameras: &[PinholeCamera]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&RigFile::from_cameras(cameras))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_rig(path: impl AsRef<Path>) -> Result<Vec<PinholeCamera>> {
    RigFile::parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::toy_rig;

    #[test]
    fn rig_round_trip() {
        let rig = toy_rig(32, 24, 0.18);
        let text = serde_json::to_string(&RigFile::from_cameras(&rig)).unwrap();
        assert_eq!(RigFile::parse(&text).unwrap(), rig);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["cameras"][0]["K"][0][0], 32.0);
        assert_eq!(v["cameras"][2]["T"][0], 0.18);
        assert_eq!(v["cameras"][4]["name"], "c11");
    }

    #[test]
    fn invalid_rigs_are_rejected() {
        assert!(RigFile::parse("{}").is_err());
        let rig = toy_rig(8, 8, 0.1);
        let mut file = RigFile::from_cameras(&rig);
        file.cameras[1].name = "c00".into();
        assert!(file.to_cameras().is_err());
        let mut file = RigFile::from_cameras(&rig);
        file.cameras[0].r[0][0] = 2.0;
        assert!(file.to_cameras().is_err());
    }
}
