#ifndef RPNET_IMAGE_IO_HPP
#define RPNET_IMAGE_IO_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "rpnet/tensor.hpp"

namespace rpnet {

using Rgb = std::array<std::uint8_t, 3>;
using Palette = std::vector<Rgb>;

/// Read an RGB image into a 3xHxW float tensor scaled to [0,1].
inline Tensor read_image(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
    if (img.empty()) throw DataError("cannot read image: " + path);
    Tensor t({3, img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            cv::Vec3b bgr = img.at<cv::Vec3b>(y, x);
            t.at(0, y, x) = bgr[2] / 255.f;
            t.at(1, y, x) = bgr[1] / 255.f;
            t.at(2, y, x) = bgr[0] / 255.f;
        }
    return t;
}

inline void write_image(const Tensor& t, const std::string& path) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw DataError("write_image: expected 3xHxW tensor");
    cv::Mat img(t.dim(1), t.dim(2), CV_8UC3);
    for (int y = 0; y < t.dim(1); ++y)
        for (int x = 0; x < t.dim(2); ++x) {
            auto q = [&](int c) {
                float v = t.at(c, y, x) * 255.f + 0.5f;
                return static_cast<std::uint8_t>(std::min(std::max(v, 0.f), 255.f));
            };
            img.at<cv::Vec3b>(y, x) = cv::Vec3b(q(2), q(1), q(0));
        }
    if (!cv::imwrite(path, img)) throw DataError("cannot write image: " + path);
}

/// Index-encoded label: single-channel PNG holding class indices.
inline void write_label_index(const LabelImage& label, const std::string& path) {
    cv::Mat img(label.height, label.width, CV_8UC1);
    for (int y = 0; y < label.height; ++y)
        for (int x = 0; x < label.width; ++x)
            img.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(label.at(y, x));
    if (!cv::imwrite(path, img)) throw DataError("cannot write label: " + path);
}

/// Palette-colored label rendering. Ignore pixels get void_color.
inline void write_label_color(const LabelImage& label, const Palette& palette,
                              const std::string& path, Rgb void_color = {0, 0, 0}) {
    cv::Mat img(label.height, label.width, CV_8UC3);
    for (int y = 0; y < label.height; ++y)
        for (int x = 0; x < label.width; ++x) {
            std::int32_t v = label.at(y, x);
            Rgb c = (v == label.ignore_index) ? void_color : palette.at(static_cast<std::size_t>(v));
            img.at<cv::Vec3b>(y, x) = cv::Vec3b(c[2], c[1], c[0]);
        }
    if (!cv::imwrite(path, img)) throw DataError("cannot write label: " + path);
}

/// Decode a label PNG. Single-channel files are read as index maps; color
/// files are decoded through the palette (unknown colors are an error unless
/// they match void_color, which maps to ignore).
inline LabelImage read_label(const std::string& path, int num_classes, int ignore_index,
                             const Palette* palette = nullptr, Rgb void_color = {0, 0, 0}) {
    cv::Mat img = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (img.empty()) throw DataError("cannot read label: " + path);
    LabelImage label(img.rows, img.cols, num_classes, ignore_index);
    if (img.channels() == 1) {
        for (int y = 0; y < img.rows; ++y)
            for (int x = 0; x < img.cols; ++x) label.at(y, x) = img.at<std::uint8_t>(y, x);
    } else if (img.channels() >= 3) {
        if (!palette) throw DataError("color-coded label needs a palette: " + path);
        for (int y = 0; y < img.rows; ++y)
            for (int x = 0; x < img.cols; ++x) {
                cv::Vec3b bgr = img.at<cv::Vec3b>(y, x);
                Rgb rgb{bgr[2], bgr[1], bgr[0]};
                if (rgb == void_color) {
                    label.at(y, x) = ignore_index;
                    continue;
                }
                auto it = std::find(palette->begin(), palette->end(), rgb);
                if (it == palette->end())
                    throw DataError("unknown palette color (" + std::to_string(rgb[0]) + "," +
                                    std::to_string(rgb[1]) + "," + std::to_string(rgb[2]) +
                                    ") in " + path);
                label.at(y, x) = static_cast<std::int32_t>(it - palette->begin());
            }
    } else {
        throw DataError("unsupported label format: " + path);
    }
    return label;
}

}  // namespace rpnet

#endif
