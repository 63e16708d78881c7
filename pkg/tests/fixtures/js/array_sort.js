let a = [3, 1, 2];
a.sort();
for (let i = 0; i < a.length; i++) { a[i] = a[i] * 2; }
