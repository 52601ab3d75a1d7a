// Converts the 10,000-digit MNIST subset shipped in the npm `mnist` package
// into gzipped IDX files that `pathnet::tasks::load_idx` understands.
//
//   npm pack mnist && tar xzf mnist-*.tgz
//   node scripts/mnist_from_npm.js package/dist/mnist.js data/mnist
const fs = require('fs');
const path = require('path');
const zlib = require('zlib');

const [src, outDir] = process.argv.slice(2);
if (!src || !outDir) {
  console.error('usage: node mnist_from_npm.js <path/to/dist/mnist.js> <out-dir>');
  process.exit(2);
}
global.window = {};
require(path.resolve(src));
const mnist = window.mnist;

// Interleave digits so that every prefix of the file is class balanced-ish.
const perDigit = [];
for (let d = 0; d < 10; d++) perDigit.push(mnist[d].range(0, mnist[d].length));
const images = [];
const labels = [];
for (let i = 0; ; i++) {
  let any = false;
  for (let d = 0; d < 10; d++) {
    if (i < perDigit[d].length) {
      images.push(perDigit[d][i]);
      labels.push(d);
      any = true;
    }
  }
  if (!any) break;
}

const n = images.length;
const img = Buffer.alloc(16 + n * 784);
img.writeUInt32BE(0x00000803, 0);
img.writeUInt32BE(n, 4);
img.writeUInt32BE(28, 8);
img.writeUInt32BE(28, 12);
images.forEach((pixels, i) => {
  pixels.forEach((v, j) => {
    img[16 + i * 784 + j] = Math.max(0, Math.min(255, Math.round(v * 255)));
  });
});
const lab = Buffer.alloc(8 + n);
lab.writeUInt32BE(0x00000801, 0);
lab.writeUInt32BE(n, 4);
labels.forEach((l, i) => { lab[8 + i] = l; });

fs.mkdirSync(outDir, { recursive: true });
fs.writeFileSync(path.join(outDir, 'train-images-idx3-ubyte.gz'), zlib.gzipSync(img, { level: 9 }));
fs.writeFileSync(path.join(outDir, 'train-labels-idx1-ubyte.gz'), zlib.gzipSync(lab, { level: 9 }));
console.log(`wrote ${n} images to ${outDir}`);
