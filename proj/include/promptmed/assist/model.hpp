#pragma once

#include "promptmed/backbone/backbone.hpp"

namespace promptmed {

/// A frozen backbone paired with one theta: the F_assist used by generators.
struct AssistModel {
  const Backbone& backbone;
  PromptEncoderState state;

  LabelMask segment(const SliceImage& image, const PromptSet& prompts) const {
    return backbone.segment(image, prompts, state);
  }
};

}  // namespace promptmed
