use crate::error::{Error, Result};

use super::NetworkSpec;

pub const BUNDLED_NETWORKS: [(&str, &str); 2] = [
    (
        "edm1-cifar10-desk",
        include_str!("../../configs/edm1-cifar10-desk.toml"),
    ),
    (
        "edm1-generic-small",
        include_str!("../../configs/edm1-generic-small.toml"),
    ),
];

pub fn bundled_network(name: &str) -> Result<NetworkSpec> {
    let (_, text) = BUNDLED_NETWORKS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("no bundled network named {name:?}")))?;
    NetworkSpec::from_toml(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse() {
        for (name, _) in BUNDLED_NETWORKS {
            let net = bundled_network(name).unwrap();
            assert_eq!(net.name, name);
        }
        assert!(bundled_network("edm9").is_err());
    }
}
