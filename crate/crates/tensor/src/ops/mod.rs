pub(crate) mod activation;
pub(crate) mod conv;
pub(crate) mod layout;
pub(crate) mod pool;
