#pragma once

#include <optional>
#include <string>

#include "nullport/loss.hpp"
#include "nullport/rng.hpp"

namespace nullport {

struct ImageDataset {
    Tensor images;  // (count, channels, h, w), values in [0, 1]
    std::vector<int> labels;
    int num_classes = 0;
    std::string name;

    std::size_t count() const { return images.empty() ? 0 : images.extent(0); }
};

// Reads the classic byte-image format: big-endian magic 0x00000803 with
// (count, rows, cols) for images, 0x00000801 with (count) for labels. Pixels
// are scaled by 1/255. Both files may be gzip-compressed; decompression is
// transparent.
ImageDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Inverse of load_idx for single-channel datasets; pixel values are rounded
// to the byte grid. Paths ending in .gz are written gzip-compressed.
void save_idx(const ImageDataset& ds, const std::string& images_path,
              const std::string& labels_path);

struct SequenceDataset {
    Tensor inputs;   // (count, window, dims)
    Tensor targets;  // (count, dims), the value `horizon` steps past the window
    std::size_t window = 0;
    std::size_t horizon = 0;
};

// Sliding windows over a seeded sine-mixture-plus-noise series. Produces
// length - window - horizon + 1 windows.
SequenceDataset synth_timeseries_windows(SeededRng& rng, std::size_t dims,
                                         std::size_t length, std::size_t window,
                                         std::size_t horizon);

// Deterministic labeled image corpus: per-class smoothed template blobs plus
// per-sample noise, quantized to the byte grid so an IDX round trip is exact.
ImageDataset synth_images(SeededRng& rng, std::size_t count, int classes,
                          std::size_t h, std::size_t w, double noise);

// Mean-pool by an integer factor that must divide both spatial extents.
ImageDataset downsample_images(const ImageDataset& ds, std::size_t factor);

// Uniform subset without replacement, order given by the seeded shuffle.
ImageDataset subset_images(const ImageDataset& ds, std::size_t count, SeededRng& rng);

Tensor flatten_images(const ImageDataset& ds);       // (count, C*h*w)
Tensor images_to_sequences(const ImageDataset& ds);  // (count, C*h*w, 1)

// Borrowed view over a dataset in model-input layout plus its targets;
// gathers index lists into batches.
struct DataView {
    const Tensor* x = nullptr;
    const Tensor* y = nullptr;
    const std::vector<int>* labels = nullptr;

    std::size_t count() const;
    Batch gather(const std::vector<std::size_t>& idx) const;
    Batch all() const;
};

// Seeded epoch iterator: every index exactly once, last partial batch kept.
class BatchIterator {
public:
    BatchIterator(std::size_t count, std::size_t batch_size, SeededRng& rng);

    std::optional<std::vector<std::size_t>> next();

private:
    std::vector<std::size_t> order_;
    std::size_t batch_size_;
    std::size_t cursor_ = 0;
};

}  // namespace nullport
