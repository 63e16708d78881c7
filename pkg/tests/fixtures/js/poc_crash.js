let arr = new Float64Array(8);
gc(true);
arr.length = 0; // CRASH_ME
