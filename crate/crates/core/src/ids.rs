//! Identifier newtypes.

use core::fmt;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $label:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        #[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
        #[cfg_attr(feature = "serde", serde(transparent))]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($label, " {}"), self.0)
            }
        }

        impl From<u32> for $name {
            fn from(v: u32) -> Self {
                Self(v)
            }
        }
    };
}

id_type!(
    /// Physical network node.
    NnId,
    "nn"
);
id_type!(LinkId, "link");
id_type!(ClusterId, "cluster");
id_type!(DomainId, "domain");
id_type!(
    /// Slice (virtual network) identifier.
    VnId,
    "vn"
);
id_type!(VnNodeId, "vn node");
id_type!(
    /// Tunnel identifier. Scoped per ingress VN node, see [`crate::slice::TunnelKey`].
    TunnelId,
    "tunnel"
);
id_type!(OpenTunnelId, "open tunnel");
id_type!(RouterId, "router");
