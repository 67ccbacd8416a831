# granage package
