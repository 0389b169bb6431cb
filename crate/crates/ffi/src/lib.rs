// C ABI surface; filled in once the core engine lands.
